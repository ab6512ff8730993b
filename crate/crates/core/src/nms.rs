//! Confidence filtering, greedy non-maximum suppression, and multi-model
//! NMS ensembling.
//!
//! Ensembling pools the boxes of every model, drops those below the
//! confidence threshold, and runs one greedy pass: the most confident box is
//! selected, every remaining box overlapping it by more than the IoU threshold
//! is discarded, and the loop repeats until nothing is left.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detio::Detection;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionConfigError {
    #[error("iou_threshold must lie in (0, 1), got {0}")]
    IouThreshold(f64),
    #[error("confidence_threshold must lie in [0, 1], got {0}")]
    ConfidenceThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Boxes whose IoU with a selected box is strictly greater than this are
    /// discarded.
    pub iou_threshold: f64,
    /// Minimum confidence kept before suppression (inclusive).
    pub confidence_threshold: f64,
    /// Suppress only among boxes of the same class.
    pub class_aware: bool,
}

impl FusionConfig {
    pub const DEFAULT_IOU_THRESHOLD: f64 = 0.45;
    pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.3;

    pub fn new(
        iou_threshold: f64,
        confidence_threshold: f64,
        class_aware: bool,
    ) -> Result<Self, FusionConfigError> {
        let cfg = Self {
            iou_threshold,
            confidence_threshold,
            class_aware,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), FusionConfigError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(FusionConfigError::IouThreshold(self.iou_threshold));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(FusionConfigError::ConfidenceThreshold(
                self.confidence_threshold,
            ));
        }
        Ok(())
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            iou_threshold: Self::DEFAULT_IOU_THRESHOLD,
            confidence_threshold: Self::DEFAULT_CONFIDENCE_THRESHOLD,
            class_aware: true,
        }
    }
}

/// Keeps detections with `confidence >= threshold`, in input order.
pub fn filter_by_confidence(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.confidence >= threshold)
        .copied()
        .collect()
}

/// Selection priority: higher confidence first, then lower model id, then
/// earlier input position.
fn priority(a: (usize, &Detection), b: (usize, &Detection)) -> Ordering {
    b.1.confidence
        .partial_cmp(&a.1.confidence)
        .unwrap_or(Ordering::Equal)
        .then(a.1.model_id.cmp(&b.1.model_id))
        .then(a.0.cmp(&b.0))
}

/// Indices into `dets` of the boxes that survive, in selection order.
pub fn greedy_nms_indices(dets: &[Detection], iou_threshold: f64, class_aware: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| priority((i, &dets[i]), (j, &dets[j])));

    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        let top = &dets[i];
        for &j in &order[rank + 1..] {
            if suppressed[j] || (class_aware && dets[j].class_id != top.class_id) {
                continue;
            }
            if top.bbox.iou(&dets[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
        keep.push(i);
    }
    keep
}

/// Greedy NMS. Returns the surviving detections in selection order
/// (non-increasing confidence). `cfg.confidence_threshold` is not applied
/// here; see [`ensemble_fuse`].
pub fn greedy_nms(dets: &[Detection], cfg: &FusionConfig) -> Vec<Detection> {
    greedy_nms_indices(dets, cfg.iou_threshold, cfg.class_aware)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Pools the outputs of several models, filters by confidence, and runs one
/// greedy NMS pass over the union.
///
/// Each inner slice is expected to hold one model's detections; the
/// `model_id` already stamped on each detection is used for tie-breaking.
pub fn ensemble_fuse<D: AsRef<[Detection]>>(per_model: &[D], cfg: &FusionConfig) -> Vec<Detection> {
    let pooled: Vec<Detection> = per_model
        .iter()
        .flat_map(|m| m.as_ref().iter())
        .filter(|d| d.confidence >= cfg.confidence_threshold)
        .copied()
        .collect();
    greedy_nms(&pooled, cfg)
}
