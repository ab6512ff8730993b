//! Reference implementations and random instance generators shared by the
//! integration tests. The oracles are written independently of the library
//! code they check.
#![allow(dead_code)]

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use nmsfuse::{BBox, Detection, GroundTruthBox};
use rand::Rng;

/// Intersection over union computed from scratch.
pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let ih = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = iw * ih;
    let union = a.width() * a.height() + b.width() * b.height() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    conf: f64,
    model: u32,
    pos: usize,
}

impl PartialEq for Queued {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Queued {
    // max-heap: higher confidence, then lower model id, then earlier position
    fn cmp(&self, o: &Self) -> Ordering {
        self.conf
            .total_cmp(&o.conf)
            .then(Reverse(self.model).cmp(&Reverse(o.model)))
            .then(Reverse(self.pos).cmp(&Reverse(o.pos)))
    }
}

/// Greedy NMS by literal simulation: take the queue head, drop every queued
/// box that overlaps it by more than the threshold, repeat.
pub fn nms_oracle(dets: &[Detection], iou_threshold: f64, class_aware: bool) -> Vec<Detection> {
    let mut heap: BinaryHeap<Queued> = dets
        .iter()
        .enumerate()
        .map(|(pos, d)| Queued {
            conf: d.confidence,
            model: d.model_id,
            pos,
        })
        .collect();
    let mut out = Vec::new();
    while let Some(top) = heap.pop() {
        let t = dets[top.pos];
        heap.retain(|q| {
            let d = &dets[q.pos];
            let same = !class_aware || d.class_id == t.class_id;
            !(same && ref_iou(&t.bbox, &d.bbox) > iou_threshold)
        });
        out.push(t);
    }
    out
}

/// Ensemble fusion by definition: concatenate, threshold, suppress.
pub fn fuse_oracle(
    per_model: &[Vec<Detection>],
    conf: f64,
    iou_threshold: f64,
    class_aware: bool,
) -> Vec<Detection> {
    let pooled: Vec<Detection> = per_model
        .concat()
        .into_iter()
        .filter(|d| d.confidence >= conf)
        .collect();
    nms_oracle(&pooled, iou_threshold, class_aware)
}

/// True-positive count for one image when only predictions with confidence
/// `>= tau` are considered.
fn tp_at(
    preds: &[Detection],
    gts: &[GroundTruthBox],
    tau: f64,
    iou_threshold: f64,
) -> (usize, usize) {
    let mut kept: Vec<&Detection> = preds.iter().filter(|p| p.confidence >= tau).collect();
    // stable: equal confidences keep input order
    kept.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    let mut free: Vec<bool> = vec![true; gts.len()];
    let mut tp = 0;
    for p in &kept {
        let mut best: Option<usize> = None;
        let mut best_iou = f64::NEG_INFINITY;
        for g in 0..gts.len() {
            if !free[g] {
                continue;
            }
            let v = ref_iou(&p.bbox, &gts[g].bbox);
            if v > best_iou {
                best_iou = v;
                best = Some(g);
            }
        }
        if let Some(g) = best {
            if best_iou >= iou_threshold {
                free[g] = false;
                tp += 1;
            }
        }
    }
    (tp, kept.len())
}

/// Single-class AP by exhaustive tabulation: re-match from scratch at every
/// distinct confidence, then take the rectangle sum.
pub fn ap_oracle(
    images: &[(Vec<GroundTruthBox>, Vec<Detection>)],
    iou_threshold: f64,
) -> Option<f64> {
    let total_gt: usize = images.iter().map(|(g, _)| g.len()).sum();
    if total_gt == 0 {
        return None;
    }
    let mut taus: Vec<f64> = images
        .iter()
        .flat_map(|(_, p)| p.iter().map(|d| d.confidence))
        .collect();
    taus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    taus.dedup();

    let mut rp: Vec<(f64, f64)> = taus
        .iter()
        .map(|&tau| {
            let (tp, n) = images
                .iter()
                .map(|(g, p)| tp_at(p, g, tau, iou_threshold))
                .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            (tp as f64 / total_gt as f64, tp as f64 / n as f64)
        })
        .collect();
    rp.push((0.0, 1.0));
    Some(
        (0..taus.len())
            .map(|k| (rp[k].0 - rp[k + 1].0) * rp[k].1)
            .sum(),
    )
}

pub fn random_box(rng: &mut impl Rng) -> BBox {
    let x0 = rng.random_range(0.0..1.0);
    let y0 = rng.random_range(0.0..1.0);
    let x1 = rng.random_range(x0..=1.0);
    let y1 = rng.random_range(y0..=1.0);
    BBox::new(x0, y0, x1, y1).unwrap()
}

/// A box near `c`, so overlaps are common.
pub fn box_near(rng: &mut impl Rng, c: &BBox, spread: f64) -> BBox {
    let mut v: [f64; 4] = (*c).into();
    for x in &mut v {
        *x = (*x + rng.random_range(-spread..=spread)).clamp(0.0, 1.0);
    }
    BBox::new(
        v[0].min(v[2]),
        v[1].min(v[3]),
        v[0].max(v[2]),
        v[1].max(v[3]),
    )
    .unwrap()
}

pub fn random_center(rng: &mut impl Rng) -> BBox {
    let w = rng.random_range(0.05..0.4);
    let h = rng.random_range(0.05..0.4);
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    BBox::new(x, y, x + w, y + h).unwrap()
}

/// Confidences on a coarse grid so ties are frequent.
pub fn coarse_conf(rng: &mut impl Rng) -> f64 {
    rng.random_range(1..=10) as f64 / 10.0
}

/// Up to `max` clustered detections over `models` models and `classes`
/// classes.
pub fn clustered_detections(
    rng: &mut impl Rng,
    max: usize,
    models: u32,
    classes: usize,
) -> Vec<Detection> {
    let centers: Vec<BBox> = (0..rng.random_range(1..=4))
        .map(|_| random_center(rng))
        .collect();
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|_| {
            let c = centers[rng.random_range(0..centers.len())];
            Detection::new(
                rng.random_range(0..classes),
                box_near(rng, &c, 0.05),
                coarse_conf(rng),
                rng.random_range(0..models),
            )
        })
        .collect()
}

/// One class: up to `max_gt` ground-truth boxes and up to `max_pred`
/// predictions, most of them near a ground-truth box.
pub fn single_class_image(
    rng: &mut impl Rng,
    max_gt: usize,
    max_pred: usize,
) -> (Vec<GroundTruthBox>, Vec<Detection>) {
    let gts: Vec<GroundTruthBox> = (0..rng.random_range(0..=max_gt))
        .map(|_| GroundTruthBox::new(0, random_center(rng)))
        .collect();
    let preds = (0..rng.random_range(0..=max_pred))
        .map(|_| {
            let b = if !gts.is_empty() && rng.random_bool(0.75) {
                let g = rng.random_range(0..gts.len());
                box_near(rng, &gts[g].bbox, 0.04)
            } else {
                random_center(rng)
            };
            Detection::new(0, b, coarse_conf(rng), 0)
        })
        .collect();
    (gts, preds)
}
