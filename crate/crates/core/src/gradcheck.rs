//! Finite-difference checks of every hand-written gradient, on seeded micro instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::afsm::{afsm_backward, afsm_forward_traced, PyramidConfig, Variant, WeightGenerator};
use crate::boxloss::{
    build_targets, center_focal_loss, mgiou_loss, offset_l1_loss, BBox, FocalParams, SizeBatch, SizeNorm, MAX_OBJECTS,
};
use crate::error::Result;
use crate::numkit::{
    affine_backward, affine_map, check_gradient, dot, global_avg_pool, global_avg_pool_backward, resize_nearest,
    resize_nearest_backward, softmax, softmax_backward, AffineParams, FdReport, FeatureMap, Fill, Resize,
};
use crate::seed;
use crate::traincore::{DetectorConfig, LossOptions, ToyDetector, OUTPUT_STRIDE};

/// Tolerance for single kernels.
pub const KERNEL_TOL: f64 = 1e-5;
/// Tolerance for composed operations.
pub const COMPOSITE_TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub name: String,
    pub tol: f64,
    pub report: FdReport,
}

impl GradcheckCase {
    pub fn pass(&self) -> bool {
        self.report.pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn pass(&self) -> bool {
        self.cases.iter().all(GradcheckCase::pass)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max)
    }
}

fn uniform(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
}

fn map(c: usize, h: usize, w: usize, s: u64) -> FeatureMap {
    FeatureMap::from_vec(c, h, w, uniform(c * h * w, -1.0, 1.0, s)).expect("sizes agree")
}

fn case(name: &str, tol: f64, report: FdReport) -> GradcheckCase {
    GradcheckCase {
        name: name.into(),
        tol,
        report,
    }
}

fn resize_case(dir: Resize, s: u64) -> GradcheckCase {
    let (h, w) = if dir == Resize::Up { (3, 2) } else { (4, 6) };
    let x = map(2, h, w, s);
    let out_shape = resize_nearest(&x, 2, dir).expect("valid").shape();
    let g = map(out_shape.0, out_shape.1, out_shape.2, s + 1);
    let name = if dir == Resize::Up { "resize_up" } else { "resize_down" };
    let r = check_gradient(
        |p| {
            let xm = FeatureMap::from_vec(2, h, w, p.to_vec()).expect("sizes agree");
            let y = resize_nearest(&xm, 2, dir).expect("valid");
            let grad = resize_nearest_backward(&g, 2, dir).expect("valid");
            (dot(y.data(), g.data()), grad.into_data())
        },
        x.data(),
        STEP,
        KERNEL_TOL,
    );
    case(name, KERNEL_TOL, r)
}

fn pool_case(s: u64) -> GradcheckCase {
    let x = map(3, 4, 5, s);
    let g = uniform(3, -1.0, 1.0, s + 1);
    let r = check_gradient(
        |p| {
            let xm = FeatureMap::from_vec(3, 4, 5, p.to_vec()).expect("sizes agree");
            let gp = global_avg_pool_backward(&g, 4, 5).expect("valid");
            (dot(&global_avg_pool(&xm), &g), gp.into_data())
        },
        x.data(),
        STEP,
        KERNEL_TOL,
    );
    case("global_avg_pool", KERNEL_TOL, r)
}

fn affine_case(s: u64) -> GradcheckCase {
    let (o, i) = (3, 4);
    let x = uniform(i, -1.0, 1.0, s);
    let p0 = AffineParams::seeded(o, i, 0.5, 0.1, s + 1);
    let g = uniform(o, -1.0, 1.0, s + 2);
    let mut flat = x.clone();
    flat.extend_from_slice(&p0.weight);
    flat.extend_from_slice(&p0.bias);
    let r = check_gradient(
        |p| {
            let x = &p[..i];
            let params = AffineParams::new(o, i, p[i..i + o * i].to_vec(), p[i + o * i..].to_vec()).expect("sizes agree");
            let y = affine_map(x, &params).expect("valid");
            let ag = affine_backward(x, &params, &g).expect("valid");
            let mut grad = ag.input;
            grad.extend(ag.weight);
            grad.extend(ag.bias);
            (dot(&y, &g), grad)
        },
        &flat,
        STEP,
        KERNEL_TOL,
    );
    case("affine", KERNEL_TOL, r)
}

fn softmax_case(s: u64) -> GradcheckCase {
    let z = uniform(5, -2.0, 2.0, s);
    let g = uniform(5, -1.0, 1.0, s + 1);
    let r = check_gradient(
        |p| {
            let y = softmax(p);
            let grad = softmax_backward(&y, &g);
            (dot(&y, &g), grad)
        },
        &z,
        STEP,
        KERNEL_TOL,
    );
    case("softmax", KERNEL_TOL, r)
}

fn afsm_case(variant: Variant, s: u64) -> GradcheckCase {
    let cfg = PyramidConfig {
        levels: vec![1, 2, 3],
        target_level: 2,
        channels: 3,
    };
    let size = 16;
    let xs: Vec<FeatureMap> = cfg
        .levels
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let n = size >> l;
            map(cfg.channels, n, n, s + k as u64).with_level(l)
        })
        .collect();
    let mut gen = WeightGenerator::new(variant, 3, 3, s + 10).expect("valid");
    if let WeightGenerator::V1 { beta, .. } = &mut gen {
        let fresh = uniform(beta.len(), -1.0, 1.0, s + 11);
        beta.copy_from_slice(&fresh);
    }
    let n_gen = gen.param_count();
    let out = afsm_forward_traced(&xs, &gen, &cfg).expect("valid").0;
    let g = map(out.channels(), out.height(), out.width(), s + 20);

    let mut flat: Vec<f64> = gen.param_sections().into_iter().flat_map(|(_, v)| v.to_vec()).collect();
    for x in &xs {
        flat.extend_from_slice(x.data());
    }
    let r = check_gradient(
        |p| {
            let mut gen = gen.clone();
            let mut rest = &p[..n_gen];
            for sl in gen.param_slices_mut() {
                let (a, b) = rest.split_at(sl.len());
                sl.copy_from_slice(a);
                rest = b;
            }
            let mut off = n_gen;
            let xs: Vec<FeatureMap> = xs
                .iter()
                .map(|x| {
                    let n = x.len();
                    let m = FeatureMap::from_vec(x.channels(), x.height(), x.width(), p[off..off + n].to_vec())
                        .expect("sizes agree")
                        .with_level(x.level().expect("tagged"));
                    off += n;
                    m
                })
                .collect();
            let (y, trace) = afsm_forward_traced(&xs, &gen, &cfg).expect("valid");
            let grad = afsm_backward(&trace, &gen, &g).expect("valid");
            let mut flat = grad.generator;
            for gi in grad.inputs {
                flat.extend(gi.into_data());
            }
            (dot(y.data(), g.data()), flat)
        },
        &flat,
        STEP,
        COMPOSITE_TOL,
    );
    case(&format!("afsm_{variant:?}").to_lowercase(), COMPOSITE_TOL, r)
}

fn mgiou_case(s: u64) -> GradcheckCase {
    let n = 8;
    let mut rng = seed::rng(s);
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    while gt.len() < n {
        let g = [rng.random_range(0.5..8.0), rng.random_range(0.5..8.0)];
        let p: [f64; 2] = [rng.random_range(-1.0..2.5), rng.random_range(-1.0..2.5)];
        // Stay away from the min/max kinks.
        if (p[0].exp() - g[0]).abs() > 1e-3 && (p[1].exp() - g[1]).abs() > 1e-3 {
            pred.push(p);
            gt.push(g);
        }
    }
    let mask: Vec<bool> = (0..n).map(|i| i % 4 != 3).collect();
    let flat: Vec<f64> = pred.iter().flatten().copied().collect();
    let r = check_gradient(
        |p| {
            let pl = p.chunks(2).map(|c| [c[0], c[1]]).collect();
            let b = SizeBatch::new(pl, gt.clone(), mask.clone()).expect("valid");
            let (l, g) = mgiou_loss(&b, SizeNorm::Sum).expect("valid");
            (l, g.into_iter().flatten().collect())
        },
        &flat,
        STEP,
        KERNEL_TOL,
    );
    case("mgiou", KERNEL_TOL, r)
}

fn focal_case(s: u64) -> GradcheckCase {
    let (c, h, w) = (2, 5, 5);
    let p = FeatureMap::from_vec(c, h, w, uniform(c * h * w, 0.05, 0.95, s)).expect("sizes agree");
    let mut gt = FeatureMap::from_vec(c, h, w, uniform(c * h * w, 0.0, 0.9, s + 1)).expect("sizes agree");
    gt.set(0, 2, 2, 1.0);
    gt.set(1, 0, 4, 1.0);
    let r = check_gradient(
        |v| {
            let pm = FeatureMap::from_vec(c, h, w, v.to_vec()).expect("sizes agree");
            let (l, g) = center_focal_loss(&pm, &gt, FocalParams::default()).expect("valid");
            (l, g.into_data())
        },
        p.data(),
        STEP,
        KERNEL_TOL,
    );
    case("focal", KERNEL_TOL, r)
}

fn offset_case(s: u64) -> GradcheckCase {
    let n = 6;
    let gt: Vec<[f64; 2]> = uniform(2 * n, 0.0, 1.0, s).chunks(2).map(|c| [c[0], c[1]]).collect();
    // Keep every residual at least 0.05 from the kink at zero.
    let flat: Vec<f64> = gt
        .iter()
        .flatten()
        .zip(uniform(2 * n, 0.05, 0.5, s + 1))
        .enumerate()
        .map(|(i, (g, d))| if i % 2 == 0 { g + d } else { g - d })
        .collect();
    let r = check_gradient(
        |p| {
            let pred: Vec<[f64; 2]> = p.chunks(2).map(|c| [c[0], c[1]]).collect();
            let (l, g) = offset_l1_loss(&pred, &gt).expect("valid");
            (l, g.into_iter().flatten().collect())
        },
        &flat,
        STEP,
        KERNEL_TOL,
    );
    case("offset_l1", KERNEL_TOL, r)
}

fn detector_case(variant: Variant, s: u64) -> Result<GradcheckCase> {
    let model = ToyDetector::new(DetectorConfig {
        pyramid: PyramidConfig {
            levels: vec![1, 2, 3],
            target_level: 2,
            channels: 4,
        },
        variant,
        num_classes: 2,
        init_seed: s,
        head_init_spread: 0.3,
    })?;
    let img = FeatureMap::new(
        3,
        16,
        16,
        Fill::SeededUniform {
            lo: 0.0,
            hi: 1.0,
            seed: s + 1,
        },
    )?;
    let pyr = model.extract_pyramid(&img)?;
    let boxes = [BBox::new(1.0, 2.0, 9.0, 8.0)?, BBox::new(8.5, 7.0, 15.0, 15.5)?];
    let t = build_targets(&boxes, &[1, 2], None, 2, 4, 4, OUTPUT_STRIDE, MAX_OBJECTS)?;
    let opts = LossOptions::default();
    let r = check_gradient(
        |p| {
            let mut m = model.clone();
            m.set_params(p).expect("sizes agree");
            match m.backward_pyramid(&pyr, &t, &opts) {
                Ok(r) => (r.loss.total, r.grad),
                Err(_) => (f64::NAN, vec![]),
            }
        },
        &model.params(),
        STEP,
        COMPOSITE_TOL,
    );
    Ok(case(
        &format!("detector_{variant:?}").to_lowercase(),
        COMPOSITE_TOL,
        r,
    ))
}

/// Run every check with instances derived from `seed`.
pub fn run_suite(seed: u64) -> Result<GradcheckReport> {
    let s = |i: u64| seed::derive(seed, 7, i);
    let mut cases = vec![
        resize_case(Resize::Up, s(0)),
        resize_case(Resize::Down, s(1)),
        pool_case(s(2)),
        affine_case(s(3)),
        softmax_case(s(4)),
    ];
    for (i, v) in [Variant::V1, Variant::V2, Variant::V3].into_iter().enumerate() {
        cases.push(afsm_case(v, s(10 + i as u64)));
    }
    cases.push(mgiou_case(s(20)));
    cases.push(focal_case(s(21)));
    cases.push(offset_case(s(22)));
    for (i, v) in [Variant::V1, Variant::V2, Variant::V3].into_iter().enumerate() {
        cases.push(detector_case(v, s(30 + i as u64))?);
    }
    Ok(GradcheckReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let r = run_suite(0).unwrap();
        for c in &r.cases {
            assert!(c.pass(), "{c:?}");
        }
        assert_eq!(r.cases.len(), 14);
    }
}
