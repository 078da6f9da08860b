mod common;

use afsm_core::afsm::PyramidConfig;
use afsm_core::infereval::{evaluate, extract_peaks, iou, multiscale_infer, nms, Detection, InferOptions};
use afsm_core::numkit::{FeatureMap, Fill};
use afsm_core::traincore::{DetectorConfig, ToyDetector, OUTPUT_STRIDE};
use proptest::prelude::*;

fn instance(seed: u64) -> (Vec<Vec<Detection>>, Vec<afsm_core::infereval::GroundTruth>) {
    common::random_eval_instance(&mut common::rng(seed), 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn nms_keeps_an_ordered_antichain(seed in any::<u64>(), thr in 0.1f64..0.9) {
        let dets = common::random_nms_set(&mut common::rng(seed), 10);
        let kept = nms(&dets, thr).unwrap();
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(dets.contains(a));
            for b in &kept[i + 1..] {
                prop_assert!(a.score >= b.score);
                prop_assert!(a.cls != b.cls || iou(&a.bbox, &b.bbox) <= thr);
            }
        }
    }

    #[test]
    fn nms_matches_constraint_oracle(seed in any::<u64>(), thr in 0.1f64..0.9) {
        let dets = common::random_nms_set(&mut common::rng(seed), 6);
        prop_assert_eq!(nms(&dets, thr).unwrap(), common::nms_oracle(&dets, thr));
    }

    #[test]
    fn evaluate_matches_reference(seed in any::<u64>()) {
        let (preds, gts) = instance(seed);
        let got = evaluate(&preds, &gts, 3).unwrap();
        let want = common::eval_reference(&preds, &gts, 3);
        prop_assert!((got.ap - want.ap).abs() < 1e-9);
        prop_assert!((got.ap50 - want.ap50).abs() < 1e-9);
        prop_assert!((got.ap75 - want.ap75).abs() < 1e-9);
        for (g, w) in [got.ar1, got.ar10, got.ar100, got.ar500].iter().zip(want.ar) {
            prop_assert!((g - w).abs() < 1e-9);
        }
    }

    #[test]
    fn ap_and_ar_orderings(seed in any::<u64>()) {
        let (preds, gts) = instance(seed);
        let r = evaluate(&preds, &gts, 3).unwrap();
        prop_assert!(r.ap <= r.ap50 + 1e-12);
        prop_assert!(r.ar1 <= r.ar10 && r.ar10 <= r.ar100 && r.ar100 <= r.ar500);
    }

    #[test]
    fn low_scoring_false_positive_never_helps(seed in any::<u64>(), img in 0usize..4, cls in 1u32..=3) {
        let (mut preds, gts) = instance(seed);
        let before = evaluate(&preds, &gts, 3).unwrap();
        let i = img % preds.len();
        // Far from every ground-truth box, below every existing score.
        let fp = Detection { bbox: afsm_core::boxloss::BBox { x1: 500.0, y1: 500.0, x2: 520.0, y2: 520.0 }, score: -1.0, cls };
        preds[i].push(fp);
        let after = evaluate(&preds, &gts, 3).unwrap();
        prop_assert!(after.ap <= before.ap + 1e-12);
        prop_assert!(after.ap50 <= before.ap50 + 1e-12);
    }

    #[test]
    fn duplicating_a_true_positive_never_helps(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let (mut preds, gts) = instance(seed);
        let before = evaluate(&preds, &gts, 3).unwrap();
        let all: Vec<(usize, usize)> = preds.iter().enumerate().flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j))).collect();
        prop_assume!(!all.is_empty());
        let (i, j) = all[pick.index(all.len())];
        let mut dup = preds[i][j];
        dup.score -= 1e-6;
        preds[i].push(dup);
        let after = evaluate(&preds, &gts, 3).unwrap();
        prop_assert!(after.ap <= before.ap + 1e-12);
    }
}

fn small_model() -> ToyDetector {
    let cfg = DetectorConfig {
        pyramid: PyramidConfig { levels: vec![2, 3, 4], target_level: 2, channels: 6 },
        num_classes: 2,
        head_init_spread: 0.5,
        ..Default::default()
    };
    ToyDetector::new(cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn single_scale_inference_is_peak_extraction(seed in any::<u64>(), thresh in 0.0f64..0.3) {
        let model = small_model();
        let img = FeatureMap::new(3, 32, 32, Fill::SeededUniform { lo: 0.0, hi: 1.0, seed }).unwrap();
        let opts = InferOptions { top_k: 50, score_thresh: thresh, nms_iou: 0.5 };
        let out = model.forward(&img).unwrap();
        let direct = extract_peaks(&out.heatmap, &out.offset, &out.size, 50, thresh, OUTPUT_STRIDE).unwrap();
        prop_assert_eq!(multiscale_infer(&model, &img, &[1.0], false, &opts).unwrap(), direct.clone());
        prop_assert_eq!(multiscale_infer(&model, &img, &[1.0, 1.0], false, &opts).unwrap(), nms(&direct, 0.5).unwrap());
    }
}
