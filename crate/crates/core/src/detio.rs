//! YOLO-format label and prediction files, class-name tables, and dataset
//! manifests.
//!
//! Label lines are `class cx cy w h` (ground truth) or `class cx cy w h conf`
//! (predictions), space separated, normalized coordinates. Writers emit six
//! fixed decimals so that output is stable across runs.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, YoloBox};

#[derive(Debug, Error)]
pub enum DetioError {
    #[error("{}line {line}: {message}", path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid class table: {0}")]
    ClassTable(String),
    #[error("invalid manifest {}: {message}", path.display())]
    Manifest { path: PathBuf, message: String },
}

impl DetioError {
    fn io(path: &Path, source: io::Error) -> Self {
        DetioError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn at_path(self, p: &Path) -> Self {
        match self {
            DetioError::Parse { line, message, .. } => DetioError::Parse {
                path: Some(p.to_path_buf()),
                line,
                message,
            },
            other => other,
        }
    }
}

pub type ClassId = usize;

/// An annotated reference box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class_id: ClassId,
    pub bbox: BBox,
}

impl GroundTruthBox {
    pub fn new(class_id: ClassId, bbox: BBox) -> Self {
        Self { class_id, bbox }
    }
}

/// A scored box emitted by one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: ClassId,
    pub bbox: BBox,
    pub confidence: f64,
    pub model_id: u32,
}

impl Detection {
    pub fn new(class_id: ClassId, bbox: BBox, confidence: f64, model_id: u32) -> Self {
        Self {
            class_id,
            bbox,
            confidence,
            model_id,
        }
    }

    pub fn as_ground_truth(&self) -> GroundTruthBox {
        GroundTruthBox::new(self.class_id, self.bbox)
    }
}

/// One parsed label line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelLine {
    Truth(GroundTruthBox),
    Prediction(Detection),
}

/// Ordered, unique class names; the index of a name is its class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassTable {
    names: Vec<String>,
}

impl ClassTable {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, DetioError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(DetioError::ClassTable(format!(
                    "class {i} has an empty name"
                )));
            }
            if !seen.insert(n.as_str()) {
                return Err(DetioError::ClassTable(format!(
                    "duplicate class name {n:?}"
                )));
            }
        }
        Ok(Self { names })
    }

    /// Reads a plain-text names file, one name per line; the line index is
    /// the class id. Trailing blank lines are ignored, interior ones are an
    /// error.
    pub fn read(path: &Path) -> Result<Self, DetioError> {
        let text = fs::read_to_string(path).map_err(|e| DetioError::io(path, e))?;
        let mut names: Vec<&str> = text.lines().map(str::trim).collect();
        while names.last().is_some_and(|l| l.is_empty()) {
            names.pop();
        }
        Self::new(names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<ClassId> {
        self.names.iter().position(|n| n == name)
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> DetioError {
    DetioError::Parse {
        path: None,
        line,
        message: message.into(),
    }
}

fn parse_f64(tok: &str, what: &str, line: usize) -> Result<f64, DetioError> {
    // Rust float parsing is locale independent; reject inf/nan spellings too.
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(line, format!("{what}: {tok:?} is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("{what}: {tok:?} is not finite")));
    }
    Ok(v)
}

/// Parses one `class cx cy w h [conf]` line.
///
/// `class_count` bounds the class id when known. `line_no` is 1-based and is
/// only used for error messages. Coordinates that fall outside the unit square
/// are clipped with a logged warning rather than rejected.
pub fn parse_label_line(
    line: &str,
    has_confidence: bool,
    class_count: Option<usize>,
    line_no: usize,
) -> Result<LabelLine, DetioError> {
    let toks: Vec<&str> = line.split_ascii_whitespace().collect();
    let want = if has_confidence { 6 } else { 5 };
    if toks.len() != want {
        return Err(parse_err(
            line_no,
            format!("expected {want} tokens, found {}", toks.len()),
        ));
    }
    let class_id: ClassId = toks[0].parse().map_err(|_| {
        parse_err(
            line_no,
            format!("class id {:?} is not a non-negative integer", toks[0]),
        )
    })?;
    if let Some(n) = class_count {
        if class_id >= n {
            return Err(parse_err(
                line_no,
                format!("class id {class_id} out of range for {n} classes"),
            ));
        }
    }
    let cx = parse_f64(toks[1], "cx", line_no)?;
    let cy = parse_f64(toks[2], "cy", line_no)?;
    let w = parse_f64(toks[3], "w", line_no)?;
    let h = parse_f64(toks[4], "h", line_no)?;
    if w < 0.0 || h < 0.0 {
        return Err(parse_err(
            line_no,
            format!("negative box extent w={w} h={h}"),
        ));
    }
    let (bbox, clipped) = YoloBox::new(cx, cy, w, h)
        .to_corner_checked()
        .map_err(|e| parse_err(line_no, e.to_string()))?;
    if clipped {
        log::warn!("line {line_no}: box ({cx} {cy} {w} {h}) clipped to the image frame");
    }
    if !has_confidence {
        return Ok(LabelLine::Truth(GroundTruthBox::new(class_id, bbox)));
    }
    let confidence = parse_f64(toks[5], "confidence", line_no)?;
    if !(0.0..=1.0).contains(&confidence) {
        return Err(parse_err(
            line_no,
            format!("confidence {confidence} outside [0, 1]"),
        ));
    }
    Ok(LabelLine::Prediction(Detection::new(
        class_id, bbox, confidence, 0,
    )))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Parses ground-truth label text, preserving line order.
pub fn parse_labels(
    text: &str,
    class_count: Option<usize>,
) -> Result<Vec<GroundTruthBox>, DetioError> {
    content_lines(text)
        .map(|(n, l)| match parse_label_line(l, false, class_count, n)? {
            LabelLine::Truth(g) => Ok(g),
            LabelLine::Prediction(d) => Ok(d.as_ground_truth()),
        })
        .collect()
}

/// Parses prediction text, stamping every detection with `model_id`.
pub fn parse_predictions(
    text: &str,
    model_id: u32,
    class_count: Option<usize>,
) -> Result<Vec<Detection>, DetioError> {
    content_lines(text)
        .map(|(n, l)| match parse_label_line(l, true, class_count, n)? {
            LabelLine::Prediction(d) => Ok(Detection { model_id, ..d }),
            LabelLine::Truth(_) => unreachable!("confidence requested"),
        })
        .collect()
}

pub fn read_label_file(
    path: &Path,
    class_count: Option<usize>,
) -> Result<Vec<GroundTruthBox>, DetioError> {
    let text = fs::read_to_string(path).map_err(|e| DetioError::io(path, e))?;
    parse_labels(&text, class_count).map_err(|e| e.at_path(path))
}

pub fn read_prediction_file(
    path: &Path,
    model_id: u32,
    class_count: Option<usize>,
) -> Result<Vec<Detection>, DetioError> {
    let text = fs::read_to_string(path).map_err(|e| DetioError::io(path, e))?;
    parse_predictions(&text, model_id, class_count).map_err(|e| e.at_path(path))
}

fn push_yolo(out: &mut String, class_id: ClassId, b: &BBox) {
    let y = b.to_yolo();
    let _ = write!(
        out,
        "{class_id} {:.6} {:.6} {:.6} {:.6}",
        y.cx, y.cy, y.w, y.h
    );
}

pub fn format_labels(gts: &[GroundTruthBox]) -> String {
    let mut out = String::new();
    for g in gts {
        push_yolo(&mut out, g.class_id, &g.bbox);
        out.push('\n');
    }
    out
}

pub fn format_predictions(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        push_yolo(&mut out, d.class_id, &d.bbox);
        let _ = writeln!(out, " {:.6}", d.confidence);
    }
    out
}

pub fn write_label_file(path: &Path, gts: &[GroundTruthBox]) -> Result<(), DetioError> {
    fs::write(path, format_labels(gts)).map_err(|e| DetioError::io(path, e))
}

pub fn write_prediction_file(path: &Path, dets: &[Detection]) -> Result<(), DetioError> {
    fs::write(path, format_predictions(dets)).map_err(|e| DetioError::io(path, e))
}

/// One image of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// Frame identifier; images sharing it stay on one side of every split.
    pub group_key: String,
    /// Resolved against the manifest's directory.
    pub label_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub classes: ClassTable,
    pub images: Vec<ImageRecord>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ClassesField {
    Inline(Vec<String>),
    File(PathBuf),
}

#[derive(Deserialize)]
struct RawImage {
    id: String,
    width: u32,
    height: u32,
    #[serde(default)]
    group: Option<String>,
    labels: PathBuf,
}

#[derive(Deserialize)]
struct RawManifest {
    classes: ClassesField,
    images: Vec<RawImage>,
}

/// On-disk form used by [`DatasetManifest::to_json`].
#[derive(Serialize)]
struct ManifestOut<'a> {
    classes: &'a [String],
    images: Vec<ImageOut<'a>>,
}

#[derive(Serialize)]
struct ImageOut<'a> {
    id: &'a str,
    width: u32,
    height: u32,
    group: &'a str,
    labels: String,
}

impl DatasetManifest {
    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.image_id == image_id)
    }

    /// Reads every image's ground-truth labels, in manifest order.
    pub fn read_labels(&self) -> Result<Vec<Vec<GroundTruthBox>>, DetioError> {
        use rayon::prelude::*;
        let n = self.classes.len();
        self.images
            .par_iter()
            .map(|r| read_label_file(&r.label_path, Some(n)))
            .collect()
    }

    /// Serializes the manifest with label paths made relative to `base` when
    /// possible.
    pub fn to_json(&self, base: &Path) -> String {
        let out = ManifestOut {
            classes: self.classes.names(),
            images: self
                .images
                .iter()
                .map(|r| ImageOut {
                    id: &r.image_id,
                    width: r.width,
                    height: r.height,
                    group: &r.group_key,
                    labels: r
                        .label_path
                        .strip_prefix(base)
                        .unwrap_or(&r.label_path)
                        .to_string_lossy()
                        .replace('\\', "/"),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&out).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Parses manifest JSON. Relative paths resolve against `base_dir`.
pub fn parse_manifest(
    json: &str,
    base_dir: &Path,
    origin: &Path,
) -> Result<DatasetManifest, DetioError> {
    let bad = |message: String| DetioError::Manifest {
        path: origin.to_path_buf(),
        message,
    };
    let raw: RawManifest = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
    let classes = match raw.classes {
        ClassesField::Inline(names) => ClassTable::new(names)?,
        ClassesField::File(p) => ClassTable::read(&base_dir.join(p))?,
    };
    let mut seen = HashSet::new();
    let mut images = Vec::with_capacity(raw.images.len());
    for r in raw.images {
        if r.id.is_empty() {
            return Err(bad("image with empty id".into()));
        }
        if !seen.insert(r.id.clone()) {
            return Err(bad(format!("duplicate image id {:?}", r.id)));
        }
        if r.width == 0 || r.height == 0 {
            return Err(bad(format!(
                "image {:?} has non-positive size {}x{}",
                r.id, r.width, r.height
            )));
        }
        let group_key = r.group.unwrap_or_else(|| r.id.clone());
        images.push(ImageRecord {
            label_path: base_dir.join(&r.labels),
            image_id: r.id,
            width: r.width,
            height: r.height,
            group_key,
        });
    }
    Ok(DatasetManifest { classes, images })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DetioError> {
    let text = fs::read_to_string(path).map_err(|e| DetioError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base, path)
}
