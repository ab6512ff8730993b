//! Seeded synthetic scenes and noisy detector models.
//!
//! Lets the ensembling pipeline be exercised end to end without trained
//! networks: scenes of ground-truth boxes are drawn from a [`SceneConfig`],
//! and each simulated detector misses, jitters, relabels and hallucinates
//! boxes according to its [`DetectorProfile`]. Every random draw comes from a
//! ChaCha8 stream keyed by `(seed, purpose, image, model, box)`, so images and
//! detectors can be generated in any order, or in parallel, with identical
//! results.
//!
//! The detector noise model is synthetic. Confidence for a detected object is
//!
//! ```text
//! clamp(base - quality_penalty * (1 - IoU(emitted, truth)) + N(0, noise_sigma), 0, 1)
//! ```
//!
//! and false positives draw their confidence uniformly from a low band.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DHAKA_AI_CLASS_COUNTS;
use crate::detio::{
    self, ClassTable, DatasetManifest, Detection, DetioError, GroundTruthBox, ImageRecord,
};
use crate::eval::{self, ApMode, EvalError, ImageSample};
use crate::geometry::BBox;
use crate::nms::{ensemble_fuse, FusionConfig, FusionConfigError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(
        "image {image}: could not place box {index} within overlap_allowance {allowance} after {attempts} attempts; \
         lower boxes_per_image or box_size, or raise overlap_allowance"
    )]
    Unsatisfiable {
        image: usize,
        index: usize,
        allowance: f64,
        attempts: usize,
    },
    #[error(transparent)]
    Fusion(#[from] FusionConfigError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] DetioError),
    #[error("writing {}: {source}", path.display())]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Placement attempts per box before a scene is declared unsatisfiable.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub image_count: usize,
    /// Inclusive `[min, max]` number of boxes per image.
    pub boxes_per_image: [usize; 2],
    pub class_names: Vec<String>,
    /// Sampling weight per class; same length as `class_names`.
    pub class_weights: Vec<f64>,
    /// Inclusive `[min, max]` normalized box width and height.
    pub box_size: [f64; 2],
    /// Largest IoU allowed between two ground-truth boxes of one image.
    pub overlap_allowance: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_count: 200,
            boxes_per_image: [4, 16],
            class_names: DHAKA_AI_CLASS_COUNTS
                .iter()
                .map(|c| c.0.to_string())
                .collect(),
            class_weights: DHAKA_AI_CLASS_COUNTS.iter().map(|c| c.1 as f64).collect(),
            box_size: [0.06, 0.25],
            overlap_allowance: 0.3,
            seed: 42,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.boxes_per_image[0] > self.boxes_per_image[1] {
            return bad(format!(
                "scene.boxes_per_image {:?} is an empty range",
                self.boxes_per_image
            ));
        }
        let [lo, hi] = self.box_size;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!(
                "scene.box_size {:?} must satisfy 0 < min <= max <= 1",
                self.box_size
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_allowance) {
            return bad(format!(
                "scene.overlap_allowance {} outside [0, 1]",
                self.overlap_allowance
            ));
        }
        if self.class_names.is_empty() {
            return bad("scene.class_names is empty".into());
        }
        if self.class_weights.len() != self.class_names.len() {
            return bad(format!(
                "scene.class_weights has {} entries for {} classes",
                self.class_weights.len(),
                self.class_names.len()
            ));
        }
        if self
            .class_weights
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
            || self.class_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("scene.class_weights must be non-negative with a positive sum".into());
        }
        ClassTable::new(self.class_names.iter().cloned())
            .map_err(|e| SimError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn class_table(&self) -> ClassTable {
        ClassTable::new(self.class_names.iter().cloned()).expect("validated class names")
    }

    /// Same config with `seed` replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceModel {
    pub base: f64,
    /// Confidence lost per unit of `1 - IoU` with the true box.
    pub quality_penalty: f64,
    pub noise_sigma: f64,
    /// Inclusive `[min, max]` confidence band for false positives.
    pub false_positive_confidence: [f64; 2],
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        Self {
            base: 0.85,
            quality_penalty: 1.0,
            noise_sigma: 0.05,
            false_positive_confidence: [0.05, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorProfile {
    pub name: String,
    /// Probability that a ground-truth box produces no detection.
    pub miss_rate: f64,
    /// Standard deviation of the additive noise on each corner coordinate.
    pub jitter_sigma: f64,
    /// Expected number of spurious boxes per image (Poisson mean).
    pub false_positive_rate: f64,
    /// Inclusive `[min, max]` width and height of spurious boxes.
    pub false_positive_size: [f64; 2],
    pub confidence: ConfidenceModel,
    /// Probability of reporting a wrong class for a detected object.
    pub class_confusion_rate: f64,
    /// Mixed into the scene seed so detectors draw independent noise.
    pub seed_offset: u64,
}

impl Default for DetectorProfile {
    fn default() -> Self {
        Self {
            name: "detector".into(),
            miss_rate: 0.2,
            jitter_sigma: 0.02,
            false_positive_rate: 0.5,
            false_positive_size: [0.05, 0.2],
            confidence: ConfidenceModel::default(),
            class_confusion_rate: 0.02,
            seed_offset: 0,
        }
    }
}

impl DetectorProfile {
    /// A detector that reproduces the ground truth exactly.
    pub fn noiseless(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            miss_rate: 0.0,
            jitter_sigma: 0.0,
            false_positive_rate: 0.0,
            class_confusion_rate: 0.0,
            confidence: ConfidenceModel {
                noise_sigma: 0.0,
                ..ConfidenceModel::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(format!("detector {:?}: {m}", self.name)));
        for (key, p) in [
            ("miss_rate", self.miss_rate),
            ("class_confusion_rate", self.class_confusion_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{key} {p} outside [0, 1]"));
            }
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return bad(format!("jitter_sigma {} must be >= 0", self.jitter_sigma));
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return bad(format!(
                "false_positive_rate {} must be >= 0",
                self.false_positive_rate
            ));
        }
        let [lo, hi] = self.false_positive_size;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!(
                "false_positive_size {:?} must satisfy 0 < min <= max <= 1",
                self.false_positive_size
            ));
        }
        let c = &self.confidence;
        let [clo, chi] = c.false_positive_confidence;
        if !(0.0..=1.0).contains(&clo) || !(0.0..=1.0).contains(&chi) || clo > chi {
            return bad(format!(
                "confidence.false_positive_confidence {:?} invalid",
                c.false_positive_confidence
            ));
        }
        if !(c.noise_sigma >= 0.0 && c.noise_sigma.is_finite())
            || !c.base.is_finite()
            || !c.quality_penalty.is_finite()
        {
            return bad("confidence model parameters must be finite, noise_sigma >= 0".into());
        }
        Ok(())
    }
}

// Stream domains for keyed generators.
const DOMAIN_SCENE_COUNT: u64 = 1;
const DOMAIN_SCENE_BOX: u64 = 2;
const DOMAIN_DETECT: u64 = 3;
const DOMAIN_FALSE_POSITIVE: u64 = 4;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator for one `(seed, domain, image, model, index)` key.
fn keyed_rng(seed: u64, domain: u64, image: usize, model: u32, index: usize) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for part in [domain, image as u64, u64::from(model), index as u64] {
        h = splitmix64(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Ground truth for image `image_index`; depends only on `(cfg, image_index)`.
pub fn generate_scene(
    cfg: &SceneConfig,
    image_index: usize,
) -> Result<Vec<GroundTruthBox>, SimError> {
    let [nmin, nmax] = cfg.boxes_per_image;
    let n = keyed_rng(cfg.seed, DOMAIN_SCENE_COUNT, image_index, 0, 0).random_range(nmin..=nmax);
    let classes = WeightedIndex::new(&cfg.class_weights)
        .map_err(|e| SimError::Config(format!("scene.class_weights: {e}")))?;
    let [smin, smax] = cfg.box_size;

    let mut out: Vec<GroundTruthBox> = Vec::with_capacity(n);
    for index in 0..n {
        let mut rng = keyed_rng(cfg.seed, DOMAIN_SCENE_BOX, image_index, 0, index);
        let placed = (0..MAX_PLACEMENT_ATTEMPTS).find_map(|_| {
            let w = rng.random_range(smin..=smax);
            let h = rng.random_range(smin..=smax);
            let x = rng.random_range(0.0..=1.0 - w);
            let y = rng.random_range(0.0..=1.0 - h);
            let b = BBox::clipped(x, y, x + w, y + h).ok()?.0;
            out.iter()
                .all(|g| g.bbox.iou(&b) <= cfg.overlap_allowance)
                .then_some(b)
        });
        let Some(bbox) = placed else {
            return Err(SimError::Unsatisfiable {
                image: image_index,
                index,
                allowance: cfg.overlap_allowance,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        };
        out.push(GroundTruthBox::new(classes.sample(&mut rng), bbox));
    }
    Ok(out)
}

/// Where a simulated detection run happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimContext {
    pub seed: u64,
    pub image_index: usize,
    pub class_count: usize,
}

fn jitter_box(b: &BBox, sigma: f64, rng: &mut ChaCha8Rng) -> BBox {
    if sigma == 0.0 {
        return *b;
    }
    let noise = Normal::new(0.0, sigma).expect("validated sigma");
    let mut c: [f64; 4] = (*b).into();
    for v in &mut c {
        *v += noise.sample(rng);
    }
    let (x0, x1) = (c[0].min(c[2]), c[0].max(c[2]));
    let (y0, y1) = (c[1].min(c[3]), c[1].max(c[3]));
    BBox::clipped(x0, y0, x1, y1)
        .expect("finite ordered corners")
        .0
}

/// Runs one synthetic detector over one image's ground truth.
///
/// Each ground-truth box is missed with `miss_rate`, otherwise emitted with
/// jittered corners, a quality-dependent confidence and possibly a confused
/// class. Poisson-distributed false positives follow the true detections.
pub fn simulate_detector(
    gts: &[GroundTruthBox],
    profile: &DetectorProfile,
    model_id: u32,
    ctx: SimContext,
) -> Vec<Detection> {
    let seed = splitmix64(ctx.seed) ^ profile.seed_offset;
    let conf = &profile.confidence;
    let conf_noise = (conf.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, conf.noise_sigma).expect("validated sigma"));
    let mut out = Vec::with_capacity(gts.len());

    for (i, g) in gts.iter().enumerate() {
        let mut rng = keyed_rng(seed, DOMAIN_DETECT, ctx.image_index, model_id, i);
        if rng.random::<f64>() < profile.miss_rate {
            continue;
        }
        let bbox = jitter_box(&g.bbox, profile.jitter_sigma, &mut rng);
        let quality = bbox.iou(&g.bbox);
        let noise = conf_noise.map_or(0.0, |n| n.sample(&mut rng));
        let confidence =
            (conf.base - conf.quality_penalty * (1.0 - quality) + noise).clamp(0.0, 1.0);
        let mut class_id = g.class_id;
        if ctx.class_count > 1 && rng.random::<f64>() < profile.class_confusion_rate {
            let other = rng.random_range(0..ctx.class_count - 1);
            class_id = if other >= g.class_id {
                other + 1
            } else {
                other
            };
        }
        out.push(Detection::new(class_id, bbox, confidence, model_id));
    }

    if profile.false_positive_rate > 0.0 && ctx.class_count > 0 {
        let mut rng = keyed_rng(seed, DOMAIN_FALSE_POSITIVE, ctx.image_index, model_id, 0);
        let count = Poisson::new(profile.false_positive_rate)
            .expect("validated rate")
            .sample(&mut rng) as usize;
        let [smin, smax] = profile.false_positive_size;
        let [cmin, cmax] = conf.false_positive_confidence;
        for _ in 0..count {
            let w = rng.random_range(smin..=smax);
            let h = rng.random_range(smin..=smax);
            let x = rng.random_range(0.0..=1.0 - w);
            let y = rng.random_range(0.0..=1.0 - h);
            let bbox = BBox::clipped(x, y, x + w, y + h)
                .expect("finite ordered corners")
                .0;
            let class_id = rng.random_range(0..ctx.class_count);
            let confidence = rng.random_range(cmin..=cmax);
            out.push(Detection::new(class_id, bbox, confidence, model_id));
        }
    }
    out
}

/// Scenes plus every detector's raw output for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub scenes: Vec<Vec<GroundTruthBox>>,
    /// `detections[model][image]`.
    pub detections: Vec<Vec<Vec<Detection>>>,
}

pub fn simulate_dataset(
    scene: &SceneConfig,
    detectors: &[DetectorProfile],
) -> Result<SimulatedDataset, SimError> {
    scene.validate()?;
    for d in detectors {
        d.validate()?;
    }
    let scenes = (0..scene.image_count)
        .into_par_iter()
        .map(|i| generate_scene(scene, i))
        .collect::<Result<Vec<_>, _>>()?;
    let class_count = scene.class_names.len();
    let detections = detectors
        .iter()
        .enumerate()
        .map(|(m, profile)| {
            scenes
                .par_iter()
                .enumerate()
                .map(|(i, gts)| {
                    simulate_detector(
                        gts,
                        profile,
                        m as u32,
                        SimContext {
                            seed: scene.seed,
                            image_index: i,
                            class_count,
                        },
                    )
                })
                .collect()
        })
        .collect();
    Ok(SimulatedDataset { scenes, detections })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub detectors: Vec<DetectorProfile>,
    pub fusion: FusionConfig,
    /// Matching IoU for the mAP comparison.
    pub iou_threshold: f64,
    /// Number of seeded repetitions; run `r` uses scene seed `scene.seed + r`.
    pub runs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            detectors: (0..4)
                .map(|i| DetectorProfile {
                    name: format!("detector-{}", i + 1),
                    seed_offset: i,
                    ..DetectorProfile::default()
                })
                .collect(),
            fusion: FusionConfig::default(),
            iou_threshold: 0.5,
            runs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.scene.validate()?;
        if self.detectors.is_empty() {
            return Err(SimError::Config("at least one detector is required".into()));
        }
        for d in &self.detectors {
            d.validate()?;
        }
        self.fusion.validate()?;
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(SimError::Config(format!(
                "iou_threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        if self.runs == 0 {
            return Err(SimError::Config("runs must be at least 1".into()));
        }
        Ok(())
    }

    /// Parses TOML; errors name the offending key path.
    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let de = toml::Deserializer::parse(text).map_err(|e| SimError::Config(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| SimError::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses JSON; errors name the offending key path.
    pub fn from_json_str(text: &str) -> Result<Self, SimError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| SimError::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|e| {
            SimError::Io(DetioError::Io {
                path: path.to_path_buf(),
                source: e,
            })
        })?;
        let parsed = if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        };
        parsed.map_err(|e| match e {
            SimError::Config(m) => SimError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub seed: u64,
    /// mAP of each detector alone, in detector order.
    pub single_map: Vec<f64>,
    pub fused_map: f64,
}

impl RunOutcome {
    /// Fused mAP strictly above every single detector.
    pub fn fused_wins(&self) -> bool {
        self.single_map.iter().all(|&m| self.fused_map > m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    /// Mean over runs.
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub iou_threshold: f64,
    pub image_count: usize,
    pub rows: Vec<ComparisonRow>,
    pub runs: Vec<RunOutcome>,
    pub wins: usize,
    pub losses: usize,
}

impl ExperimentReport {
    pub fn ensemble_row(&self) -> &ComparisonRow {
        self.rows.last().expect("ensemble row")
    }

    pub fn single_rows(&self) -> &[ComparisonRow] {
        &self.rows[..self.rows.len() - 1]
    }

    pub fn win_fraction(&self) -> f64 {
        self.wins as f64 / self.runs.len() as f64
    }

    pub fn to_table(&self) -> String {
        let head = format!("mAP@{}", self.iou_threshold);
        let w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(0)
            .max(10)
            + 2;
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}{head:>10}", "Model Name");
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$}{:>10.4}", r.name, r.map);
        }
        let _ = writeln!(
            s,
            "\nruns: {}  images/run: {}  ensemble wins: {}  losses: {}",
            self.runs.len(),
            self.image_count,
            self.wins,
            self.losses
        );
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Runs one seed: every detector alone (through the same filter + NMS
/// path) and the ensemble of all of them.
pub fn run_once(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome, SimError> {
    let scene = cfg.scene.with_seed(seed);
    let data = simulate_dataset(&scene, &cfg.detectors)?;
    let class_count = scene.class_names.len();
    let score = |preds: &[Vec<Detection>]| -> Result<f64, SimError> {
        let samples: Vec<ImageSample<'_>> = data
            .scenes
            .iter()
            .zip(preds)
            .map(|(g, p)| ImageSample {
                ground_truth: g,
                predictions: p,
            })
            .collect();
        Ok(eval::map_at(
            &samples,
            class_count,
            cfg.iou_threshold,
            ApMode::Literal,
        )?)
    };

    let mut single_map = Vec::with_capacity(cfg.detectors.len());
    for model in &data.detections {
        let fused: Vec<Vec<Detection>> = model
            .par_iter()
            .map(|d| ensemble_fuse(std::slice::from_ref(d), &cfg.fusion))
            .collect();
        single_map.push(score(&fused)?);
    }
    let fused: Vec<Vec<Detection>> = (0..scene.image_count)
        .into_par_iter()
        .map(|i| {
            let per_model: Vec<&[Detection]> =
                data.detections.iter().map(|m| m[i].as_slice()).collect();
            ensemble_fuse(&per_model, &cfg.fusion)
        })
        .collect();
    let fused_map = score(&fused)?;
    Ok(RunOutcome {
        seed,
        single_map,
        fused_map,
    })
}

/// Scores each detector alone and the NMS ensemble of all detectors over
/// `cfg.runs` seeds, producing a model-vs-model comparison.
pub fn run_ensemble_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, SimError> {
    cfg.validate()?;
    let runs = (0..cfg.runs as u64)
        .map(|r| run_once(cfg, cfg.scene.seed.wrapping_add(r)))
        .collect::<Result<Vec<_>, _>>()?;
    let n = runs.len() as f64;
    let mut rows: Vec<ComparisonRow> = cfg
        .detectors
        .iter()
        .enumerate()
        .map(|(m, d)| ComparisonRow {
            name: d.name.clone(),
            map: runs.iter().map(|r| r.single_map[m]).sum::<f64>() / n,
        })
        .collect();
    rows.push(ComparisonRow {
        name: format!("NMS ensemble ({} detectors)", cfg.detectors.len()),
        map: runs.iter().map(|r| r.fused_map).sum::<f64>() / n,
    });
    let wins = runs.iter().filter(|r| r.fused_wins()).count();
    Ok(ExperimentReport {
        schema_version: eval::SCHEMA_VERSION,
        iou_threshold: cfg.iou_threshold,
        image_count: cfg.scene.image_count,
        rows,
        wins,
        losses: runs.len() - wins,
        runs,
    })
}

/// Files written by [`materialize`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaterializedDataset {
    pub manifest_path: PathBuf,
    /// One directory per detector, in detector order.
    pub prediction_dirs: Vec<PathBuf>,
}

fn dir_name(name: &str, index: usize) -> String {
    let clean: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{:02}_{clean}", index + 1)
}

/// Writes the first run's scenes and raw detector outputs to `out`:
/// `manifest.json`, `labels/<id>.txt`, and `predictions/<NN_name>/<id>.txt`.
pub fn materialize(cfg: &ExperimentConfig, out: &Path) -> Result<MaterializedDataset, SimError> {
    cfg.validate()?;
    let data = simulate_dataset(&cfg.scene, &cfg.detectors)?;
    let werr = |path: &Path, source| SimError::Write {
        path: path.to_path_buf(),
        source,
    };
    let labels_dir = out.join("labels");
    fs::create_dir_all(&labels_dir).map_err(|e| werr(&labels_dir, e))?;
    let ids: Vec<String> = (0..cfg.scene.image_count)
        .map(|i| format!("img_{i:05}"))
        .collect();

    let mut images = Vec::with_capacity(ids.len());
    for (id, gts) in ids.iter().zip(&data.scenes) {
        let path = labels_dir.join(format!("{id}.txt"));
        detio::write_label_file(&path, gts)?;
        images.push(ImageRecord {
            image_id: id.clone(),
            width: 1024,
            height: 1024,
            group_key: id.clone(),
            label_path: path,
        });
    }
    let manifest = DatasetManifest {
        classes: cfg.scene.class_table(),
        images,
    };
    let manifest_path = out.join("manifest.json");
    fs::write(&manifest_path, manifest.to_json(out)).map_err(|e| werr(&manifest_path, e))?;

    let mut prediction_dirs = Vec::with_capacity(cfg.detectors.len());
    for (m, (profile, dets)) in cfg.detectors.iter().zip(&data.detections).enumerate() {
        let dir = out.join("predictions").join(dir_name(&profile.name, m));
        fs::create_dir_all(&dir).map_err(|e| werr(&dir, e))?;
        for (id, d) in ids.iter().zip(dets) {
            detio::write_prediction_file(&dir.join(format!("{id}.txt")), d)?;
        }
        prediction_dirs.push(dir);
    }
    Ok(MaterializedDataset {
        manifest_path,
        prediction_dirs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_scene() -> SceneConfig {
        SceneConfig {
            image_count: 20,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn empty_scene() {
        let cfg = SceneConfig {
            boxes_per_image: [0, 0],
            ..small_scene()
        };
        assert!(generate_scene(&cfg, 3).unwrap().is_empty());
    }

    #[test]
    fn single_class_weight() {
        let mut w = vec![0.0; 21];
        w[3] = 1.0;
        let cfg = SceneConfig {
            class_weights: w,
            ..small_scene()
        };
        for i in 0..10 {
            assert!(generate_scene(&cfg, i)
                .unwrap()
                .iter()
                .all(|g| g.class_id == 3));
        }
    }

    #[test]
    fn scenes_are_deterministic_and_respect_overlap() {
        let cfg = small_scene();
        for i in 0..20 {
            let a = generate_scene(&cfg, i).unwrap();
            assert_eq!(a, generate_scene(&cfg, i).unwrap());
            let [lo, hi] = cfg.boxes_per_image;
            assert!((lo..=hi).contains(&a.len()));
            for x in 0..a.len() {
                for y in x + 1..a.len() {
                    assert!(a[x].bbox.iou(&a[y].bbox) <= cfg.overlap_allowance);
                }
            }
        }
        assert_ne!(
            generate_scene(&cfg, 0).unwrap(),
            generate_scene(&cfg, 1).unwrap()
        );
    }

    #[test]
    fn impossible_overlap_constraint_errors() {
        let cfg = SceneConfig {
            boxes_per_image: [30, 30],
            box_size: [0.9, 0.9],
            overlap_allowance: 0.0,
            ..small_scene()
        };
        let e = generate_scene(&cfg, 0).unwrap_err();
        assert!(matches!(e, SimError::Unsatisfiable { .. }));
        assert!(e.to_string().contains("overlap_allowance"));
    }

    fn ctx(i: usize) -> SimContext {
        SimContext {
            seed: 9,
            image_index: i,
            class_count: 21,
        }
    }

    #[test]
    fn total_miss_without_false_positives_is_empty() {
        let gts = generate_scene(&small_scene(), 0).unwrap();
        let p = DetectorProfile {
            miss_rate: 1.0,
            false_positive_rate: 0.0,
            ..DetectorProfile::default()
        };
        assert!(simulate_detector(&gts, &p, 0, ctx(0)).is_empty());
    }

    #[test]
    fn noiseless_detector_reproduces_ground_truth() {
        let gts = generate_scene(&small_scene(), 1).unwrap();
        let d = simulate_detector(&gts, &DetectorProfile::noiseless("n"), 2, ctx(1));
        assert_eq!(d.len(), gts.len());
        for (a, g) in d.iter().zip(&gts) {
            assert_eq!(a.bbox, g.bbox);
            assert_eq!(a.class_id, g.class_id);
            assert_eq!(a.model_id, 2);
            assert_eq!(a.confidence, 0.85);
        }
    }

    #[test]
    fn jitter_lowers_mean_iou() {
        let p = DetectorProfile {
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            class_confusion_rate: 0.0,
            jitter_sigma: 0.02,
            ..DetectorProfile::default()
        };
        let (mut sum, mut n) = (0.0, 0);
        for i in 0..20 {
            let gts = generate_scene(&small_scene(), i).unwrap();
            for (d, g) in simulate_detector(&gts, &p, 0, ctx(i)).iter().zip(&gts) {
                sum += d.bbox.iou(&g.bbox);
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!(mean < 1.0 && mean > 0.5, "{mean}");
    }

    #[test]
    fn detectors_draw_independent_noise() {
        let gts = generate_scene(&small_scene(), 0).unwrap();
        let p = DetectorProfile::default();
        let a = simulate_detector(&gts, &p, 0, ctx(0));
        assert_eq!(a, simulate_detector(&gts, &p, 0, ctx(0)));
        let b = simulate_detector(&gts, &p, 1, ctx(0));
        assert_ne!(
            a.iter().map(|d| d.bbox).collect::<Vec<_>>(),
            b.iter().map(|d| d.bbox).collect::<Vec<_>>()
        );
    }

    #[test]
    fn noiseless_experiment_scores_one() {
        let cfg = ExperimentConfig {
            scene: small_scene(),
            detectors: (0..3)
                .map(|i| DetectorProfile::noiseless(format!("n{i}")))
                .collect(),
            ..ExperimentConfig::default()
        };
        let r = run_ensemble_experiment(&cfg).unwrap();
        assert!(r.rows.iter().all(|row| row.map == 1.0), "{:?}", r.rows);
        assert_eq!(r.wins, 0);
    }

    #[test]
    fn single_detector_ensemble_equals_single_row() {
        let cfg = ExperimentConfig {
            scene: small_scene(),
            detectors: vec![DetectorProfile::default()],
            ..ExperimentConfig::default()
        };
        let r = run_ensemble_experiment(&cfg).unwrap();
        assert_eq!(r.rows[0].map, r.rows[1].map);
    }

    #[test]
    fn config_parsing_reports_key_path() {
        let e = ExperimentConfig::from_toml_str("[scene]\nimage_count = \"many\"\n").unwrap_err();
        assert!(e.to_string().contains("scene.image_count"), "{e}");
        let e = ExperimentConfig::from_toml_str("[[detectors]]\nmiss_rte = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("detectors"), "{e}");
        let e =
            ExperimentConfig::from_json_str(r#"{"fusion": {"iou_threshold": "x"}}"#).unwrap_err();
        assert!(e.to_string().contains("fusion.iou_threshold"), "{e}");
        let e = ExperimentConfig::from_toml_str("[[detectors]]\nmiss_rate = 1.5\n").unwrap_err();
        assert!(e.to_string().contains("miss_rate"), "{e}");
    }

    #[test]
    fn config_defaults_fill_missing_keys() {
        let cfg = ExperimentConfig::from_toml_str("runs = 3\n[scene]\nimage_count = 10\n").unwrap();
        assert_eq!(cfg.runs, 3);
        assert_eq!(cfg.scene.image_count, 10);
        assert_eq!(cfg.detectors.len(), 4);
        assert_eq!(cfg.fusion, FusionConfig::default());
    }

    #[test]
    fn materialized_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            scene: SceneConfig {
                image_count: 5,
                ..SceneConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let m = materialize(&cfg, dir.path()).unwrap();
        let manifest = detio::load_manifest(&m.manifest_path).unwrap();
        assert_eq!(manifest.images.len(), 5);
        assert_eq!(manifest.classes.len(), 21);
        assert_eq!(m.prediction_dirs.len(), 4);
        let labels = manifest.read_labels().unwrap();
        let expected = generate_scene(&cfg.scene, 0).unwrap();
        assert_eq!(labels[0].len(), expected.len());
    }
}
