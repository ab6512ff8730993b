//! Detection scoring: prediction-to-ground-truth matching, precision/recall
//! curves, average precision and mean average precision.
//!
//! AP is the rectangle sum over the curve's distinct confidence thresholds
//! `tau_0 < tau_1 < ... < tau_{n-1}`:
//!
//! ```text
//! AP = sum_{k=0}^{n-1} [Recall(k) - Recall(k+1)] * Precision(k),  Recall(n) = 0
//! ```
//!
//! where `Recall(k)` and `Precision(k)` are computed over the predictions
//! with confidence `>= tau_k`. mAP is the plain mean of the per-class APs.
//! Classes without ground truth have no defined AP and are left out of the
//! mean.
//!
//! A 101-point interpolated AP is available through [`ApMode`] for
//! comparison with other tools.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detio::{ClassTable, DatasetManifest, Detection, DetioError, GroundTruthBox};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("recall undefined: no ground-truth boxes")]
    NoGroundTruth,
    #[error("mAP undefined: no class has ground-truth boxes")]
    NoClasses,
    #[error("invalid IoU range {lo}:{hi}:{step}")]
    InvalidRange { lo: f64, hi: f64, step: f64 },
    #[error("IoU threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("predictions reference images missing from the manifest: {}", .0.join(", "))]
    UnknownImages(Vec<String>),
    #[error("image {image}: class id {class_id} out of range for {class_count} classes")]
    UnknownClass {
        image: String,
        class_id: usize,
        class_count: usize,
    },
    #[error(transparent)]
    Io(#[from] DetioError),
}

/// One prediction after matching, in rank order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankedPrediction {
    pub confidence: f64,
    pub is_tp: bool,
    /// Index into the ground-truth slice of the image this came from.
    pub matched_gt: Option<usize>,
}

/// Matching outcome for one class, either for a single image or pooled.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MatchResult {
    /// Sorted by descending confidence.
    pub ranked: Vec<RankedPrediction>,
    pub total_gt: usize,
}

impl MatchResult {
    pub fn tp_count(&self) -> usize {
        self.ranked.iter().filter(|r| r.is_tp).count()
    }

    /// Concatenates per-image results and re-ranks by confidence.
    pub fn pooled(parts: impl IntoIterator<Item = MatchResult>) -> MatchResult {
        let mut out = MatchResult::default();
        for p in parts {
            out.ranked.extend(p.ranked);
            out.total_gt += p.total_gt;
        }
        out.ranked
            .sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        out
    }
}

/// Matches one image's predictions against its ground truth for one class.
///
/// Predictions are visited by descending confidence (ties keep input order).
/// Each claims the still-unmatched ground-truth box with the highest IoU if
/// that IoU is at least `iou_threshold`; otherwise it is a false positive.
/// IoU ties go to the lowest ground-truth index.
pub fn match_detections(
    preds: &[Detection],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));

    let mut taken = vec![false; gts.len()];
    let ranked = order
        .into_iter()
        .map(|i| {
            let p = &preds[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = p.bbox.iou(&gt.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            let matched = best.filter(|&(_, v)| v >= iou_threshold).map(|(g, _)| g);
            if let Some(g) = matched {
                taken[g] = true;
            }
            RankedPrediction {
                confidence: p.confidence,
                is_tp: matched.is_some(),
                matched_gt: matched,
            }
        })
        .collect();
    MatchResult {
        ranked,
        total_gt: gts.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
    /// True positives among predictions at or above `threshold`.
    pub true_positives: usize,
}

/// Precision/recall at each distinct confidence, thresholds ascending.
///
/// Recall is non-increasing along the points. Past the last point the curve
/// continues with `Recall(n) = 0`, `Precision(n) = 1`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub total_gt: usize,
}

impl PrCurve {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.points.get(k).map_or(0.0, |p| p.recall)
    }

    pub fn precision(&self, k: usize) -> f64 {
        self.points.get(k).map_or(1.0, |p| p.precision)
    }

    /// `threshold,recall,precision` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,recall,precision\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.recall, p.precision);
        }
        s
    }
}

pub fn pr_curve(m: &MatchResult) -> Result<PrCurve, EvalError> {
    if m.total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let g = m.total_gt as f64;
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < m.ranked.len() {
        let tau = m.ranked[i].confidence;
        while i < m.ranked.len() && m.ranked[i].confidence == tau {
            if m.ranked[i].is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: tau,
            recall: tp as f64 / g,
            precision: tp as f64 / (tp + fp) as f64,
            true_positives: tp,
        });
    }
    points.reverse();
    Ok(PrCurve {
        points,
        total_gt: m.total_gt,
    })
}

/// Rectangle-sum AP over the curve; 0 for an empty curve.
///
/// Recall steps are taken as true-positive count differences and divided by
/// the ground-truth count once at the end, so a perfect curve sums to exactly
/// 1.
pub fn average_precision(curve: &PrCurve) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let tp = |k: usize| curve.points.get(k).map_or(0, |p| p.true_positives);
    let sum: f64 = (0..curve.len())
        .map(|k| (tp(k) - tp(k + 1)) as f64 * curve.precision(k))
        .sum();
    sum / curve.total_gt as f64
}

/// 101-point interpolated AP: mean over `r = 0, 0.01, ..., 1` of the best
/// precision reached at recall `>= r`.
pub fn interpolated_average_precision(curve: &PrCurve) -> f64 {
    (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            curve
                .points
                .iter()
                .filter(|p| p.recall >= r - 1e-12)
                .map(|p| p.precision)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Rectangle sum over the raw curve.
    #[default]
    Literal,
    Interpolated101,
}

impl ApMode {
    pub fn ap(self, curve: &PrCurve) -> f64 {
        match self {
            ApMode::Literal => average_precision(curve),
            ApMode::Interpolated101 => interpolated_average_precision(curve),
        }
    }
}

/// Mean of the given per-class APs. The caller decides which classes are
/// included.
pub fn mean_average_precision(per_class_ap: &[f64]) -> Result<f64, EvalError> {
    if per_class_ap.is_empty() {
        return Err(EvalError::NoClasses);
    }
    Ok(per_class_ap.iter().sum::<f64>() / per_class_ap.len() as f64)
}

/// One image's ground truth and predictions.
#[derive(Debug, Clone, Copy)]
pub struct ImageSample<'a> {
    pub ground_truth: &'a [GroundTruthBox],
    pub predictions: &'a [Detection],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub class_id: usize,
    pub gt_count: usize,
    pub pred_count: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub curve: Option<PrCurve>,
}

/// Per-class AP at one IoU threshold, pooling all images.
pub fn evaluate_classes(
    samples: &[ImageSample<'_>],
    class_count: usize,
    iou_threshold: f64,
    mode: ApMode,
) -> Vec<ClassResult> {
    let per_image: Vec<Vec<MatchResult>> = samples
        .par_iter()
        .map(|s| {
            let mut gts: Vec<Vec<GroundTruthBox>> = vec![Vec::new(); class_count];
            let mut preds: Vec<Vec<Detection>> = vec![Vec::new(); class_count];
            for g in s.ground_truth {
                gts[g.class_id].push(*g);
            }
            for p in s.predictions {
                preds[p.class_id].push(*p);
            }
            (0..class_count)
                .map(|c| match_detections(&preds[c], &gts[c], iou_threshold))
                .collect()
        })
        .collect();

    let mut buckets: Vec<Vec<MatchResult>> = vec![Vec::with_capacity(samples.len()); class_count];
    for img in per_image {
        for (c, m) in img.into_iter().enumerate() {
            buckets[c].push(m);
        }
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(class_id, parts)| {
            let pooled = MatchResult::pooled(parts);
            let curve = pr_curve(&pooled).ok();
            ClassResult {
                class_id,
                gt_count: pooled.total_gt,
                pred_count: pooled.ranked.len(),
                ap: curve.as_ref().map(|c| mode.ap(c)),
                curve,
            }
        })
        .collect()
}

/// mAP over the classes that have ground truth.
pub fn map_from_classes(classes: &[ClassResult]) -> Result<f64, EvalError> {
    let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
    mean_average_precision(&aps)
}

pub fn map_at(
    samples: &[ImageSample<'_>],
    class_count: usize,
    iou_threshold: f64,
    mode: ApMode,
) -> Result<f64, EvalError> {
    map_from_classes(&evaluate_classes(samples, class_count, iou_threshold, mode))
}

fn round_threshold(v: f64) -> f64 {
    (v * 1e10).round() / 1e10
}

/// `lo, lo + step, ..., hi` with accumulated float error rounded away.
pub fn iou_thresholds(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>, EvalError> {
    let bad = EvalError::InvalidRange { lo, hi, step };
    if !(lo > 0.0 && lo <= hi && hi <= 1.0 && step > 0.0) || !step.is_finite() {
        return Err(bad);
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..n)
        .map(|i| round_threshold(lo + i as f64 * step))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouSweep {
    /// `(iou_threshold, mAP)` pairs.
    pub entries: Vec<(f64, f64)>,
    pub mean: f64,
}

pub fn map_over_iou_range(
    samples: &[ImageSample<'_>],
    class_count: usize,
    lo: f64,
    hi: f64,
    step: f64,
    mode: ApMode,
) -> Result<IouSweep, EvalError> {
    let entries = iou_thresholds(lo, hi, step)?
        .into_iter()
        .map(|t| map_at(samples, class_count, t, mode).map(|m| (t, m)))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = entries.iter().map(|e| e.1).sum::<f64>() / entries.len() as f64;
    Ok(IouSweep { entries, mean })
}

/// Which IoU thresholds a report covers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouSpec {
    Single(f64),
    Range { lo: f64, hi: f64, step: f64 },
}

impl IouSpec {
    /// The conventional 0.5:0.95:0.05 sweep.
    pub const COCO_RANGE: IouSpec = IouSpec::Range {
        lo: 0.5,
        hi: 0.95,
        step: 0.05,
    };

    pub fn thresholds(&self) -> Result<Vec<f64>, EvalError> {
        match *self {
            IouSpec::Single(t) if t > 0.0 && t <= 1.0 => Ok(vec![t]),
            IouSpec::Single(t) => Err(EvalError::InvalidThreshold(t)),
            IouSpec::Range { lo, hi, step } => iou_thresholds(lo, hi, step),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Row label in the comparison table.
    pub model_name: String,
    /// Predictions below this confidence are ignored.
    pub confidence_threshold: f64,
    pub ap_mode: ApMode,
    /// Seconds since the Unix epoch, if the caller wants one recorded.
    pub timestamp_unix: Option<u64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            model_name: "model".into(),
            confidence_threshold: 0.0,
            ap_mode: ApMode::Literal,
            timestamp_unix: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub gt_count: usize,
    pub pred_count: usize,
    /// AP at the first IoU threshold.
    pub ap: Option<f64>,
    /// AP at every IoU threshold, in threshold order.
    pub ap_by_threshold: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdMap {
    pub iou_threshold: f64,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub model_name: String,
    pub iou_thresholds: Vec<f64>,
    pub confidence_threshold: f64,
    pub ap_mode: ApMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_unix: Option<u64>,
    pub image_count: usize,
    pub classes: Vec<ClassReport>,
    /// Names of classes without ground truth, left out of every mean.
    pub excluded_classes: Vec<String>,
    pub map: Vec<ThresholdMap>,
    /// Mean of `map` over the thresholds.
    pub map_mean: f64,
    /// Curves at the first IoU threshold, indexed by class id.
    #[serde(skip)]
    pub curves: Vec<Option<PrCurve>>,
}

fn thr_label(t: f64) -> String {
    format!("{t}")
}

impl EvalReport {
    /// mAP at the first (or only) IoU threshold.
    pub fn primary_map(&self) -> f64 {
        self.map.first().map_or(0.0, |m| m.map)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Human-readable summary: the model/mAP row, a per-threshold block for
    /// sweeps, and the per-class table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let first = thr_label(self.iou_thresholds[0]);
        let head = format!("mAP@{first}");
        let name_w = self.model_name.len().max(10) + 2;
        let _ = writeln!(s, "{:<name_w$}{head:>10}", "Model Name");
        let _ = writeln!(
            s,
            "{:<name_w$}{:>10.4}",
            self.model_name,
            self.primary_map()
        );

        if self.map.len() > 1 {
            s.push('\n');
            let _ = writeln!(s, "{:<16}{:>10}", "IoU threshold", "mAP");
            for m in &self.map {
                let _ = writeln!(
                    s,
                    "{:<16}{:>10.4}",
                    format!("{:.2}", m.iou_threshold),
                    m.map
                );
            }
            let lo = self.iou_thresholds[0];
            let hi = *self.iou_thresholds.last().unwrap();
            let _ = writeln!(
                s,
                "{:<16}{:>10.4}",
                format!("mean {lo:.2}:{hi:.2}"),
                self.map_mean
            );
        }

        s.push('\n');
        let cw = self
            .classes
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(5)
            .max(5)
            + 2;
        let _ = writeln!(
            s,
            "{:<cw$}{:>8}{:>8}{:>10}",
            "Class",
            "GT",
            "Pred",
            format!("AP@{first}")
        );
        for c in &self.classes {
            let ap = c.ap.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{:<cw$}{:>8}{:>8}{:>10}",
                c.name, c.gt_count, c.pred_count, ap
            );
        }
        if !self.excluded_classes.is_empty() {
            let _ = writeln!(
                s,
                "\nexcluded (no ground truth): {}",
                self.excluded_classes.join(", ")
            );
        }
        s
    }
}

/// Scores in-memory samples. `samples[i]` must use class ids valid for
/// `classes`.
pub fn evaluate(
    classes: &ClassTable,
    samples: &[ImageSample<'_>],
    spec: &IouSpec,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let thresholds = spec.thresholds()?;
    let n = classes.len();

    let filtered: Vec<Vec<Detection>> = samples
        .iter()
        .map(|s| crate::nms::filter_by_confidence(s.predictions, opts.confidence_threshold))
        .collect();
    let samples: Vec<ImageSample<'_>> = samples
        .iter()
        .zip(&filtered)
        .map(|(s, p)| ImageSample {
            ground_truth: s.ground_truth,
            predictions: p,
        })
        .collect();

    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        per_threshold.push(evaluate_classes(&samples, n, t, opts.ap_mode));
    }

    let map = thresholds
        .iter()
        .zip(&per_threshold)
        .map(|(&t, cls)| {
            map_from_classes(cls).map(|m| ThresholdMap {
                iou_threshold: t,
                map: m,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let map_mean = map.iter().map(|m| m.map).sum::<f64>() / map.len() as f64;

    let first = &per_threshold[0];
    let class_reports = first
        .iter()
        .map(|c| ClassReport {
            class_id: c.class_id,
            name: classes.name(c.class_id).unwrap_or_default().to_string(),
            gt_count: c.gt_count,
            pred_count: c.pred_count,
            ap: c.ap,
            ap_by_threshold: per_threshold
                .iter()
                .filter_map(|cls| cls[c.class_id].ap)
                .collect(),
        })
        .collect::<Vec<_>>();
    let excluded_classes = class_reports
        .iter()
        .filter(|c| c.ap.is_none())
        .map(|c| c.name.clone())
        .collect();

    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        model_name: opts.model_name.clone(),
        iou_thresholds: thresholds,
        confidence_threshold: opts.confidence_threshold,
        ap_mode: opts.ap_mode,
        timestamp_unix: opts.timestamp_unix,
        image_count: samples.len(),
        classes: class_reports,
        excluded_classes,
        map,
        map_mean,
        curves: per_threshold
            .into_iter()
            .next()
            .unwrap()
            .into_iter()
            .map(|c| c.curve)
            .collect(),
    })
}

/// Scores predictions against the manifest's label files.
///
/// Images without an entry in `predictions_by_image` count as having no
/// predictions.
pub fn evaluate_dataset(
    manifest: &DatasetManifest,
    predictions_by_image: &BTreeMap<String, Vec<Detection>>,
    spec: &IouSpec,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let unknown: Vec<String> = predictions_by_image
        .keys()
        .filter(|id| manifest.image(id).is_none())
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(EvalError::UnknownImages(unknown));
    }
    let n = manifest.classes.len();
    for (image, dets) in predictions_by_image {
        if let Some(d) = dets.iter().find(|d| d.class_id >= n) {
            return Err(EvalError::UnknownClass {
                image: image.clone(),
                class_id: d.class_id,
                class_count: n,
            });
        }
    }
    let labels = manifest.read_labels()?;
    let empty = Vec::new();
    let samples: Vec<ImageSample<'_>> = manifest
        .images
        .iter()
        .zip(&labels)
        .map(|(r, gts)| ImageSample {
            ground_truth: gts,
            predictions: predictions_by_image.get(&r.image_id).unwrap_or(&empty),
        })
        .collect();
    evaluate(&manifest.classes, &samples, spec, opts)
}
