use afsm_core::boxloss::{
    decode_box, encode_targets, mgiou_loss, mgiou_single, offset_l1_loss, total_loss, BBox, LossWeights, SizeBatch,
    SizeNorm,
};
use afsm_core::numkit::check_gradient;
use proptest::prelude::*;

fn size() -> impl Strategy<Value = f64> {
    0.05f64..200.0
}

fn iou_of_centered(pw: f64, ph: f64, gw: f64, gh: f64) -> f64 {
    let inter = pw.min(gw) * ph.min(gh);
    inter / (pw * ph + gw * gh - inter)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decode_inverts_encode(x1 in 0.0f64..500.0, y1 in 0.0f64..500.0, w in 0.5f64..200.0, h in 0.5f64..200.0, stride in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let b = BBox::new(x1, y1, x1 + w, y1 + h).unwrap();
        let s = stride as f64;
        let got = decode_box(&encode_targets(&b, stride).unwrap().params()).unwrap().scaled(s, s);
        for (a, e) in <[f64; 4]>::from(got).iter().zip(<[f64; 4]>::from(b)) {
            prop_assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn mgiou_is_bounded(pw in size(), ph in size(), gw in size(), gh in size()) {
        let (l, _, _) = mgiou_single(pw, ph, gw, gh);
        prop_assert!((0.0..2.0).contains(&l));
    }

    #[test]
    fn mgiou_under_dominance_is_one_minus_iou(gw in size(), gh in size(), fw in 1.0f64..4.0, fh in 1.0f64..4.0, pred_bigger in any::<bool>()) {
        let (pw, ph) = if pred_bigger { (gw * fw, gh * fh) } else { (gw / fw, gh / fh) };
        let (l, _, _) = mgiou_single(pw, ph, gw, gh);
        prop_assert!((l - (1.0 - iou_of_centered(pw, ph, gw, gh))).abs() < 1e-12);
    }

    #[test]
    fn mgiou_is_symmetric_and_scale_free(pw in size(), ph in size(), gw in size(), gh in size(), s in 0.01f64..100.0) {
        let (l, _, _) = mgiou_single(pw, ph, gw, gh);
        let (swapped, _, _) = mgiou_single(gw, gh, pw, ph);
        let (scaled, _, _) = mgiou_single(pw * s, ph * s, gw * s, gh * s);
        prop_assert!((l - swapped).abs() < 1e-12);
        prop_assert!((l - scaled).abs() < 1e-12);
    }

    #[test]
    fn masked_slots_are_inert(
        n in 1usize..8,
        seed_vals in prop::collection::vec((-2.0f64..3.0, -2.0f64..3.0, 0.2f64..20.0, 0.2f64..20.0, any::<bool>()), 8),
        bump in -3.0f64..3.0,
    ) {
        let vals = &seed_vals[..n];
        let pred: Vec<[f64; 2]> = vals.iter().map(|v| [v.0, v.1]).collect();
        let gt: Vec<[f64; 2]> = vals.iter().map(|v| [v.2, v.3]).collect();
        let mask: Vec<bool> = vals.iter().map(|v| v.4).collect();
        let base = mgiou_loss(&SizeBatch::new(pred.clone(), gt.clone(), mask.clone()).unwrap(), SizeNorm::Sum).unwrap();
        for i in (0..n).filter(|&i| !mask[i]) {
            prop_assert_eq!(base.1[i], [0.0, 0.0]);
            let mut p = pred.clone();
            p[i] = [p[i][0] + bump, p[i][1] - bump];
            let other = mgiou_loss(&SizeBatch::new(p, gt.clone(), mask.clone()).unwrap(), SizeNorm::Sum).unwrap();
            prop_assert_eq!(&other, &base);
        }
    }

    #[test]
    fn mgiou_gradient_matches_differences(
        n in 1usize..8,
        vals in prop::collection::vec((-1.5f64..2.5, -1.5f64..2.5, 0.3f64..10.0, 0.3f64..10.0), 8),
        mean in any::<bool>(),
    ) {
        let vals = &vals[..n];
        // Stay away from min/max ties, where the loss has a kink.
        prop_assume!(vals.iter().all(|v| (v.0.exp() - v.2).abs() > 1e-3 && (v.1.exp() - v.3).abs() > 1e-3));
        let gt: Vec<[f64; 2]> = vals.iter().map(|v| [v.2, v.3]).collect();
        let x: Vec<f64> = vals.iter().flat_map(|v| [v.0, v.1]).collect();
        let norm = if mean { SizeNorm::Mean } else { SizeNorm::Sum };
        let f = |p: &[f64]| {
            let pred = p.chunks(2).map(|c| [c[0], c[1]]).collect();
            let (l, g) = mgiou_loss(&SizeBatch::new(pred, gt.clone(), vec![true; gt.len()]).unwrap(), norm).unwrap();
            (l, g.into_iter().flatten().collect())
        };
        let r = check_gradient(f, &x, 1e-7, 1e-5);
        prop_assert!(r.pass, "{:?}", r);
    }

    #[test]
    fn offset_gradient_matches_differences(vals in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..8)) {
        prop_assume!(vals.iter().all(|v| (v.0 - v.2).abs() > 1e-3 && (v.1 - v.3).abs() > 1e-3));
        let gt: Vec<[f64; 2]> = vals.iter().map(|v| [v.2, v.3]).collect();
        let x: Vec<f64> = vals.iter().flat_map(|v| [v.0, v.1]).collect();
        let f = |p: &[f64]| {
            let pred: Vec<[f64; 2]> = p.chunks(2).map(|c| [c[0], c[1]]).collect();
            let (l, g) = offset_l1_loss(&pred, &gt).unwrap();
            (l, g.into_iter().flatten().collect())
        };
        let r = check_gradient(f, &x, 1e-7, 1e-5);
        prop_assert!(r.pass, "{:?}", r);
    }

    #[test]
    fn total_is_linear_in_components(ct in 0.0f64..10.0, sz in 0.0f64..10.0, off in 0.0f64..10.0, ls in 0.0f64..5.0, lo in 0.0f64..5.0, k in 0.0f64..3.0) {
        let w = LossWeights { lambda_size: ls, lambda_off: lo };
        let a = total_loss(ct, sz, off, &w).unwrap().total;
        let b = total_loss(ct, sz * (1.0 + k), off, &w).unwrap().total;
        let c = total_loss(ct, sz, off * (1.0 + k), &w).unwrap().total;
        prop_assert!((b - a - ls * sz * k).abs() < 1e-9);
        prop_assert!((c - a - lo * off * k).abs() < 1e-9);
        prop_assert!((a - (ct + ls * sz + lo * off)).abs() < 1e-12);
    }
}
