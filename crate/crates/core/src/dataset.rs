//! Dataset tooling: per-class label counts, grouped k-fold splits, and
//! ground-truth label audits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::detio::{DatasetManifest, DetioError, GroundTruthBox};

/// Class names of the DhakaAI traffic dataset with their training-set label
/// counts, in the order they are usually tabulated.
pub const DHAKA_AI_CLASS_COUNTS: [(&str, u64); 21] = [
    ("Ambulance", 76),
    ("Army Vehicle", 25),
    ("Auto Rickshaw", 465),
    ("Bicycle", 465),
    ("Bus", 3340),
    ("Car", 5574),
    ("Garbage Van", 8),
    ("Human Hauler", 170),
    ("Minibus", 100),
    ("Minivan", 815),
    ("Motorbike", 2252),
    ("Pickup", 1178),
    ("Police Car", 33),
    ("Rickshaw", 3495),
    ("Scooter", 30),
    ("SUV", 667),
    ("Taxi", 59),
    ("Three Wheeler (CNG)", 2982),
    ("Truck", 1475),
    ("Van", 682),
    ("Wheelbarrow", 251),
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] DetioError),
    #[error("fold count must be at least 2, got {0}")]
    TooFewFolds(usize),
    #[error("cannot build {folds} folds from {groups} distinct group(s)")]
    TooFewGroups { folds: usize, groups: usize },
    #[error("writing {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassCount {
    pub class_id: usize,
    pub name: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassStats {
    pub classes: Vec<ClassCount>,
    pub total: u64,
    pub image_count: usize,
}

impl ClassStats {
    pub fn from_labels<'a>(
        names: &[String],
        labels: impl IntoIterator<Item = &'a [GroundTruthBox]>,
    ) -> Self {
        let mut counts = vec![0u64; names.len()];
        let mut image_count = 0;
        for img in labels {
            image_count += 1;
            for g in img {
                counts[g.class_id] += 1;
            }
        }
        let classes = names
            .iter()
            .zip(counts)
            .enumerate()
            .map(|(class_id, (name, count))| ClassCount {
                class_id,
                name: name.clone(),
                count,
            })
            .collect::<Vec<_>>();
        let total = classes.iter().map(|c| c.count).sum();
        Self {
            classes,
            total,
            image_count,
        }
    }

    pub fn count(&self, name: &str) -> Option<u64> {
        self.classes
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.count)
    }

    /// Aligned `Class Name  Label Count` table with a total line.
    pub fn to_table(&self) -> String {
        let w = self
            .classes
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(0)
            .max("Class Name".len())
            + 2;
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}{:>12}", "Class Name", "Label Count");
        for c in &self.classes {
            let _ = writeln!(s, "{:<w$}{:>12}", c.name, c.count);
        }
        let _ = writeln!(s, "{:<w$}{:>12}", "Total", self.total);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class_id,class_name,label_count\n");
        for c in &self.classes {
            let name = if c.name.contains([',', '"']) {
                format!("\"{}\"", c.name.replace('"', "\"\""))
            } else {
                c.name.clone()
            };
            let _ = writeln!(s, "{},{},{}", c.class_id, name, c.count);
        }
        s
    }
}

/// Counts every ground-truth box per class across the manifest.
pub fn class_stats(manifest: &DatasetManifest) -> Result<ClassStats, DatasetError> {
    let labels = manifest.read_labels()?;
    Ok(ClassStats::from_labels(
        manifest.classes.names(),
        labels.iter().map(Vec::as_slice),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldSpec {
    pub fold_index: usize,
    /// Manifest order.
    pub train_image_ids: Vec<String>,
    /// Manifest order.
    pub val_image_ids: Vec<String>,
}

/// Grouped k-fold split.
///
/// Distinct group keys are sorted, shuffled with a ChaCha8 generator seeded
/// from `seed`, and dealt round-robin into `k` validation buckets. Fold `i`
/// validates on bucket `i` and trains on the rest, so images sharing a group
/// never straddle a split.
pub fn split_folds(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<Vec<FoldSpec>, DatasetError> {
    if k < 2 {
        return Err(DatasetError::TooFewFolds(k));
    }
    let groups: BTreeSet<&str> = manifest
        .images
        .iter()
        .map(|r| r.group_key.as_str())
        .collect();
    if groups.len() < k {
        return Err(DatasetError::TooFewGroups {
            folds: k,
            groups: groups.len(),
        });
    }
    let mut groups: Vec<&str> = groups.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    let bucket: BTreeMap<&str, usize> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| (*g, i % k))
        .collect();

    Ok((0..k)
        .map(|fold| {
            let (val, train): (Vec<_>, Vec<_>) = manifest
                .images
                .iter()
                .partition(|r| bucket[r.group_key.as_str()] == fold);
            FoldSpec {
                fold_index: fold,
                train_image_ids: train.into_iter().map(|r| r.image_id.clone()).collect(),
                val_image_ids: val.into_iter().map(|r| r.image_id.clone()).collect(),
            }
        })
        .collect())
}

/// Writes `fold{N}_train.txt` and `fold{N}_val.txt` (N 1-based) into `dir`,
/// one image id per line. Returns the written paths.
pub fn write_folds(folds: &[FoldSpec], dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let werr = |path: &Path, source| DatasetError::Write {
        path: path.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(|e| werr(dir, e))?;
    let mut written = Vec::with_capacity(folds.len() * 2);
    for f in folds {
        for (side, ids) in [("train", &f.train_image_ids), ("val", &f.val_image_ids)] {
            let path = dir.join(format!("fold{}_{side}.txt", f.fold_index + 1));
            let mut body = String::new();
            for id in ids {
                body.push_str(id);
                body.push('\n');
            }
            fs::write(&path, body).map_err(|e| werr(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

pub const DEFAULT_AUDIT_IOU: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Two near-identical boxes with the same class.
    DoubleLabel {
        first: usize,
        second: usize,
        iou: f64,
    },
    /// Two near-identical boxes with different classes.
    ConflictingLabel {
        first: usize,
        second: usize,
        iou: f64,
    },
    /// Zero width or height.
    Degenerate { index: usize },
}

impl AnomalyKind {
    pub fn category(&self) -> &'static str {
        match self {
            AnomalyKind::DoubleLabel { .. } => "double-label",
            AnomalyKind::ConflictingLabel { .. } => "conflicting-label",
            AnomalyKind::Degenerate { .. } => "degenerate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Anomaly {
    pub image_id: String,
    #[serde(flatten)]
    pub kind: AnomalyKind,
    /// Class names of the boxes involved.
    pub classes: Vec<String>,
}

/// Audits one image's labels. Box indices are positions in `gts`.
pub fn audit_image(gts: &[GroundTruthBox], iou_threshold: f64) -> Vec<AnomalyKind> {
    let mut out = Vec::new();
    for (i, g) in gts.iter().enumerate() {
        if g.bbox.is_degenerate() {
            out.push(AnomalyKind::Degenerate { index: i });
        }
    }
    for i in 0..gts.len() {
        for j in i + 1..gts.len() {
            let iou = gts[i].bbox.iou(&gts[j].bbox);
            if iou <= iou_threshold {
                continue;
            }
            out.push(if gts[i].class_id == gts[j].class_id {
                AnomalyKind::DoubleLabel {
                    first: i,
                    second: j,
                    iou,
                }
            } else {
                AnomalyKind::ConflictingLabel {
                    first: i,
                    second: j,
                    iou,
                }
            });
        }
    }
    out
}

pub fn audit_labels(
    manifest: &DatasetManifest,
    iou_threshold: f64,
) -> Result<Vec<Anomaly>, DatasetError> {
    let labels = manifest.read_labels()?;
    let name = |id: usize| manifest.classes.name(id).unwrap_or("?").to_string();
    let mut out = Vec::new();
    for (rec, gts) in manifest.images.iter().zip(&labels) {
        for kind in audit_image(gts, iou_threshold) {
            let classes = match kind {
                AnomalyKind::DoubleLabel { first, second, .. }
                | AnomalyKind::ConflictingLabel { first, second, .. } => {
                    vec![name(gts[first].class_id), name(gts[second].class_id)]
                }
                AnomalyKind::Degenerate { index } => vec![name(gts[index].class_id)],
            };
            out.push(Anomaly {
                image_id: rec.image_id.clone(),
                kind,
                classes,
            });
        }
    }
    Ok(out)
}
