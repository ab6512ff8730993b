mod common;

use nmsfuse::dataset::ClassStats;
use nmsfuse::eval::{evaluate_classes, map_from_classes, ApMode, ImageSample};
use nmsfuse::nms::greedy_nms_indices;
use nmsfuse::simulate::{simulate_dataset, DetectorProfile, SceneConfig};
use nmsfuse::{ensemble_fuse, greedy_nms, BBox, Detection, FusionConfig, GroundTruthBox};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn dets_strategy() -> impl Strategy<Value = (Vec<Detection>, u64)> {
    any::<u64>().prop_map(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (clustered_detections(&mut rng, 20, 3, 2), seed)
    })
}

fn single_ap(images: &[(Vec<GroundTruthBox>, Vec<Detection>)], iou: f64) -> Option<f64> {
    let samples: Vec<ImageSample<'_>> = images
        .iter()
        .map(|(g, p)| ImageSample {
            ground_truth: g,
            predictions: p,
        })
        .collect();
    evaluate_classes(&samples, 1, iou, ApMode::Literal)[0].ap
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nms_output_is_non_suppressing_subset(
        (dets, _) in dets_strategy(),
        iou in 0.1f64..0.9,
        aware in any::<bool>(),
    ) {
        let cfg = FusionConfig::new(iou, 0.0, aware).unwrap();
        let out = greedy_nms(&dets, &cfg);
        for d in &out {
            prop_assert!(dets.contains(d));
        }
        for w in out.windows(2) {
            prop_assert!(w[0].confidence >= w[1].confidence);
        }
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                if !aware || a.class_id == b.class_id {
                    prop_assert!(a.bbox.iou(&b.bbox) <= iou);
                }
            }
        }
        // every dropped box is explained by a kept one
        let kept = greedy_nms_indices(&dets, iou, aware);
        for (i, d) in dets.iter().enumerate() {
            if kept.contains(&i) {
                continue;
            }
            let explained = out.iter().any(|k| {
                (!aware || k.class_id == d.class_id)
                    && k.confidence >= d.confidence
                    && k.bbox.iou(&d.bbox) > iou
            });
            prop_assert!(explained);
        }
    }

    #[test]
    fn nms_is_idempotent((dets, _) in dets_strategy(), iou in 0.1f64..0.9, aware in any::<bool>()) {
        let cfg = FusionConfig::new(iou, 0.0, aware).unwrap();
        let once = greedy_nms(&dets, &cfg);
        prop_assert_eq!(greedy_nms(&once, &cfg), once);
    }

    #[test]
    fn nms_survivor_set_ignores_input_order((dets, seed) in dets_strategy(), iou in 0.1f64..0.9) {
        // make every priority key unique so order cannot matter
        let dets: Vec<Detection> = dets
            .iter()
            .enumerate()
            .map(|(i, d)| Detection::new(d.class_id, d.bbox, d.confidence, i as u32))
            .collect();
        let cfg = FusionConfig::new(iou, 0.0, true).unwrap();
        let a = greedy_nms(&dets, &cfg);
        let mut shuffled = dets.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        prop_assert_eq!(greedy_nms(&shuffled, &cfg), a);
    }

    #[test]
    fn nms_is_deterministic((dets, _) in dets_strategy(), iou in 0.1f64..0.9) {
        let cfg = FusionConfig::new(iou, 0.0, false).unwrap();
        prop_assert_eq!(greedy_nms(&dets, &cfg), greedy_nms(&dets, &cfg));
    }

    #[test]
    fn single_model_fusion_is_filtered_nms((dets, _) in dets_strategy(), conf in 0.0f64..1.0) {
        let cfg = FusionConfig::new(0.45, conf, true).unwrap();
        let filtered: Vec<Detection> = dets.iter().filter(|d| d.confidence >= conf).copied().collect();
        prop_assert_eq!(ensemble_fuse(&[dets], &cfg), greedy_nms(&filtered, &cfg));
    }

    #[test]
    fn ap_ignores_monotone_rescaling(seed in any::<u64>(), iou in 0.3f64..0.8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<_> = (0..3).map(|_| single_class_image(&mut rng, 5, 8)).collect();
        let rescaled: Vec<_> = images
            .iter()
            .map(|(g, p)| {
                let p = p
                    .iter()
                    .map(|d| Detection::new(0, d.bbox, d.confidence * d.confidence * 0.5, 0))
                    .collect();
                (g.clone(), p)
            })
            .collect();
        prop_assert_eq!(single_ap(&images, iou), single_ap(&rescaled, iou));
    }

    #[test]
    fn low_confidence_false_positive_never_raises_ap(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images: Vec<_> = (0..2).map(|_| single_class_image(&mut rng, 5, 8)).collect();
        let Some(before) = single_ap(&images, 0.5) else { return Ok(()) };
        // a box nowhere near anything, below every existing confidence
        let far = BBox::new(0.999, 0.999, 1.0, 1.0).unwrap();
        images[0].1.push(Detection::new(0, far, 0.01, 0));
        let after = single_ap(&images, 0.5).unwrap();
        prop_assert!(after <= before + 1e-12, "{} -> {}", before, after);
    }

    #[test]
    fn top_ranked_true_positive_never_lowers_ap(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut gts, mut preds) = single_class_image(&mut rng, 5, 8);
        // a fresh ground-truth box, then an exact hit on it ranked above everything
        let fresh = BBox::new(0.0, 0.95, 0.02, 0.97).unwrap();
        gts.push(GroundTruthBox::new(0, fresh));
        let before = single_ap(&[(gts.clone(), preds.clone())], 0.5).unwrap();
        preds.push(Detection::new(0, fresh, 2.0, 0));
        let after = single_ap(&[(gts, preds)], 0.5).unwrap();
        prop_assert!(after >= before - 1e-12, "{} -> {}", before, after);
    }

    #[test]
    fn map_with_one_class_is_its_ap(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, p) = single_class_image(&mut rng, 5, 8);
        let samples = [ImageSample { ground_truth: &g, predictions: &p }];
        let classes = evaluate_classes(&samples, 1, 0.5, ApMode::Literal);
        match classes[0].ap {
            Some(ap) => prop_assert_eq!(map_from_classes(&classes).unwrap(), ap),
            None => prop_assert!(map_from_classes(&classes).is_err()),
        }
    }

    #[test]
    fn class_totals_ignore_image_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
        let mut images: Vec<Vec<GroundTruthBox>> = (0..10)
            .map(|_| {
                clustered_detections(&mut rng, 6, 1, 4)
                    .iter()
                    .map(|d| d.as_ground_truth())
                    .collect()
            })
            .collect();
        let a = ClassStats::from_labels(&names, images.iter().map(Vec::as_slice));
        images.shuffle(&mut rng);
        let b = ClassStats::from_labels(&names, images.iter().map(Vec::as_slice));
        prop_assert_eq!(a, b);
    }
}

fn small_scene(seed: u64) -> SceneConfig {
    SceneConfig {
        image_count: 40,
        seed,
        ..SceneConfig::default()
    }
}

#[test]
fn simulation_is_deterministic() {
    let profiles = vec![
        DetectorProfile::default(),
        DetectorProfile {
            seed_offset: 9,
            ..DetectorProfile::default()
        },
    ];
    let a = simulate_dataset(&small_scene(5), &profiles).unwrap();
    let b = simulate_dataset(&small_scene(5), &profiles).unwrap();
    assert_eq!(a, b);
    let c = simulate_dataset(&small_scene(6), &profiles).unwrap();
    assert_ne!(a, c);
}

#[test]
fn noiseless_detector_is_perfect() {
    let scene = small_scene(3);
    let sim = simulate_dataset(&scene, &[DetectorProfile::noiseless("oracle")]).unwrap();
    let samples: Vec<ImageSample<'_>> = sim
        .scenes
        .iter()
        .zip(&sim.detections[0])
        .map(|(g, p)| ImageSample {
            ground_truth: g,
            predictions: p,
        })
        .collect();
    let classes = evaluate_classes(&samples, scene.class_names.len(), 0.5, ApMode::Literal);
    assert_eq!(map_from_classes(&classes).unwrap(), 1.0);
}

#[test]
fn higher_miss_rate_lowers_recall() {
    let scene = small_scene(11);
    let recall = |miss: f64| {
        let p = DetectorProfile {
            miss_rate: miss,
            false_positive_rate: 0.0,
            ..DetectorProfile::default()
        };
        let sim = simulate_dataset(&scene, &[p]).unwrap();
        let found: usize = sim.detections[0].iter().map(Vec::len).sum();
        let total: usize = sim.scenes.iter().map(Vec::len).sum();
        found as f64 / total as f64
    };
    let (lo, mid, hi) = (recall(0.05), recall(0.3), recall(0.7));
    assert!(lo > mid && mid > hi, "{lo} {mid} {hi}");
}
