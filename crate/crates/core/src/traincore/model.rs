//! The toy detector: fixed pyramid, AFSM fusion and per-position linear heads.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::afsm::{afsm_backward, afsm_forward_traced, AfsmTrace, PyramidConfig, SelectionWeights, Variant, WeightGenerator};
use crate::boxloss::{
    center_focal_loss, mgiou_loss, offset_l1_loss_weighted, total_loss, DetectionTargets, FocalParams, LossBundle,
    LossWeights, SizeBatch, SizeNorm,
};
use crate::error::{Error, Result};
use crate::numkit::{resize_nearest, resize_nearest_backward, AffineParams, FeatureMap, Resize};
use crate::seed;

use super::extractor::extract_pyramid;

/// Prediction maps are this many times smaller than the input.
pub const OUTPUT_STRIDE: usize = 4;

/// Initial heatmap bias; `sigmoid(-2.19)` is about 0.1.
pub const HEAT_BIAS_INIT: f64 = -2.19;
pub const OFFSET_BIAS_INIT: f64 = 0.5;
/// Initial log-size, in output cells.
pub const SIZE_BIAS_INIT: f64 = 1.791_759_469_228_055;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub pyramid: PyramidConfig,
    pub variant: Variant,
    pub num_classes: usize,
    pub init_seed: u64,
    /// Half-width of the uniform initialization of head weights; 0 starts them at zero.
    pub head_init_spread: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            pyramid: PyramidConfig::default(),
            variant: Variant::V1,
            num_classes: 4,
            init_seed: 0,
            head_init_spread: 0.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("detector needs at least one class".into()));
        }
        if !(self.head_init_spread >= 0.0 && self.head_init_spread.is_finite()) {
            return Err(Error::Config(format!("head_init_spread {}", self.head_init_spread)));
        }
        Ok(())
    }

    /// JSON with fields in declaration order; the basis of the checkpoint digest.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json().as_bytes()).into()
    }
}

/// Loss settings shared by training and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub size_norm: SizeNorm,
    pub focal: FocalParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    config: DetectorConfig,
    pub generator: WeightGenerator,
    pub heat: AffineParams,
    pub offset: AffineParams,
    pub size: AffineParams,
}

/// Raw prediction maps at the output stride.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput {
    /// `K` channels of center probabilities in (0, 1).
    pub heatmap: FeatureMap,
    /// Sub-cell center offsets `(eps_x, eps_y)`.
    pub offset: FeatureMap,
    /// Log width and height in output cells.
    pub size: FeatureMap,
    pub weights: SelectionWeights,
}

/// Loss, flat gradient in [`ToyDetector::param_sections`] order, and the selection weights used.
#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub loss: LossBundle,
    pub grad: Vec<f64>,
    pub weights: SelectionWeights,
}

fn head(out: usize, d: usize, spread: f64, bias: f64, seed: u64) -> AffineParams {
    if spread > 0.0 {
        AffineParams::seeded(out, d, spread, bias, seed)
    } else {
        let mut p = AffineParams::zeros(out, d);
        p.bias.fill(bias);
        p
    }
}

impl ToyDetector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let d = config.pyramid.channels;
        let m = config.pyramid.num_levels();
        let s = config.init_seed;
        let spread = config.head_init_spread;
        Ok(Self {
            generator: WeightGenerator::new(config.variant, m, d, seed::derive(s, 10, 0))?,
            heat: head(config.num_classes, d, spread, HEAT_BIAS_INIT, seed::derive(s, 11, 0)),
            offset: head(2, d, spread, OFFSET_BIAS_INIT, seed::derive(s, 12, 0)),
            size: head(2, d, spread, SIZE_BIAS_INIT, seed::derive(s, 13, 0)),
            config,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn param_sections(&self) -> Vec<(String, &[f64])> {
        let mut s = self.generator.param_sections();
        for (name, p) in [("heat", &self.heat), ("offset", &self.offset), ("size", &self.size)] {
            s.push((format!("head.{name}.weight"), p.weight.as_slice()));
            s.push((format!("head.{name}.bias"), p.bias.as_slice()));
        }
        s
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = self.generator.param_slices_mut();
        for p in [&mut self.heat, &mut self.offset, &mut self.size] {
            s.push(p.weight.as_mut_slice());
            s.push(p.bias.as_mut_slice());
        }
        s
    }

    pub fn param_count(&self) -> usize {
        self.param_sections().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.param_sections().into_iter().flat_map(|(_, s)| s.to_vec()).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.param_count();
        if flat.len() != n {
            return Err(Error::Length {
                expected: n,
                got: flat.len(),
            });
        }
        let mut rest = flat;
        for s in self.param_slices_mut() {
            let (head, tail) = rest.split_at(s.len());
            s.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn extract_pyramid(&self, img: &FeatureMap) -> Result<Vec<FeatureMap>> {
        extract_pyramid(img, &self.config.pyramid)
    }

    fn feature_resize(&self) -> (usize, Resize) {
        let k = self.config.pyramid.target_level;
        let base = OUTPUT_STRIDE.trailing_zeros() as i32;
        let dir = if k >= base { Resize::Up } else { Resize::Down };
        (1usize << (k - base).unsigned_abs(), dir)
    }

    fn forward_traced(&self, pyramid: &[FeatureMap]) -> Result<(DetectorOutput, AfsmTrace, FeatureMap)> {
        let (fused, trace) = afsm_forward_traced(pyramid, &self.generator, &self.config.pyramid)?;
        let (factor, dir) = self.feature_resize();
        let features = resize_nearest(&fused, factor, dir)?;
        let mut heatmap = apply_head(&features, &self.heat);
        for v in heatmap.data_mut() {
            *v = sigmoid(*v);
        }
        let out = DetectorOutput {
            heatmap,
            offset: apply_head(&features, &self.offset),
            size: apply_head(&features, &self.size),
            weights: trace.weights.clone(),
        };
        Ok((out, trace, features))
    }

    pub fn forward_pyramid(&self, pyramid: &[FeatureMap]) -> Result<DetectorOutput> {
        Ok(self.forward_traced(pyramid)?.0)
    }

    pub fn forward(&self, img: &FeatureMap) -> Result<DetectorOutput> {
        self.forward_pyramid(&self.extract_pyramid(img)?)
    }

    pub fn backward_pyramid(
        &self,
        pyramid: &[FeatureMap],
        targets: &DetectionTargets,
        opts: &LossOptions,
    ) -> Result<BackwardResult> {
        let (out, trace, features) = self.forward_traced(pyramid)?;
        let grads = loss_grads(&out, targets, opts)?;

        let mut d_features = FeatureMap::zeros(features.channels(), features.height(), features.width());
        let heat_g = head_backward(&features, &self.heat, &grads.d_heat_logit, &mut d_features);
        let off_g = head_backward(&features, &self.offset, &grads.d_offset, &mut d_features);
        let size_g = head_backward(&features, &self.size, &grads.d_size, &mut d_features);

        let (factor, dir) = self.feature_resize();
        let d_fused = resize_nearest_backward(&d_features, factor, dir)?;
        let afsm = afsm_backward(&trace, &self.generator, &d_fused)?;

        let mut grad = afsm.generator;
        grad.reserve(heat_g.len() + off_g.len() + size_g.len());
        grad.extend(heat_g);
        grad.extend(off_g);
        grad.extend(size_g);
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        Ok(BackwardResult {
            loss: grads.loss,
            grad,
            weights: out.weights,
        })
    }

    pub fn backward(&self, img: &FeatureMap, targets: &DetectionTargets, opts: &LossOptions) -> Result<BackwardResult> {
        self.backward_pyramid(&self.extract_pyramid(img)?, targets, opts)
    }

    /// Loss only, without gradients.
    pub fn loss_pyramid(&self, pyramid: &[FeatureMap], targets: &DetectionTargets, opts: &LossOptions) -> Result<LossBundle> {
        let out = self.forward_pyramid(pyramid)?;
        Ok(loss_grads(&out, targets, opts)?.loss)
    }
}

pub fn detector_forward(model: &ToyDetector, img: &FeatureMap) -> Result<DetectorOutput> {
    model.forward(img)
}

pub fn detector_backward(
    model: &ToyDetector,
    img: &FeatureMap,
    targets: &DetectionTargets,
    opts: &LossOptions,
) -> Result<(LossBundle, Vec<f64>)> {
    let r = model.backward(img, targets, opts)?;
    Ok((r.loss, r.grad))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn apply_head(x: &FeatureMap, p: &AffineParams) -> FeatureMap {
    let (d, h, w) = x.shape();
    let mut out = FeatureMap::zeros(p.out_dim, h, w);
    for o in 0..p.out_dim {
        let row = p.row(o);
        let dst = out.channel_mut(o);
        dst.fill(p.bias[o]);
        for c in 0..d {
            let wc = row[c];
            if wc == 0.0 {
                continue;
            }
            for (y, xv) in dst.iter_mut().zip(x.channel(c)) {
                *y += wc * xv;
            }
        }
    }
    out
}

/// Gradient of one head: returns `[d weight, d bias]` flat and accumulates into `d_x`.
fn head_backward(x: &FeatureMap, p: &AffineParams, d_out: &FeatureMap, d_x: &mut FeatureMap) -> Vec<f64> {
    let d = x.channels();
    let mut dw = vec![0.0; p.out_dim * d];
    let mut db = vec![0.0; p.out_dim];
    for o in 0..p.out_dim {
        let g = d_out.channel(o);
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        db[o] = g.iter().sum();
        let row = p.row(o);
        for c in 0..d {
            dw[o * d + c] = crate::numkit::dot(g, x.channel(c));
            let wc = row[c];
            if wc != 0.0 {
                for (dx, gv) in d_x.channel_mut(c).iter_mut().zip(g) {
                    *dx += wc * gv;
                }
            }
        }
    }
    dw.extend(db);
    dw
}

struct LossGrads {
    loss: LossBundle,
    d_heat_logit: FeatureMap,
    d_offset: FeatureMap,
    d_size: FeatureMap,
}

fn loss_grads(out: &DetectorOutput, targets: &DetectionTargets, opts: &LossOptions) -> Result<LossGrads> {
    let (_, h, w) = out.heatmap.shape();
    if targets.heatmap.shape() != out.heatmap.shape() {
        return Err(Error::shape(format!(
            "target heatmap {:?} vs prediction {:?}",
            targets.heatmap.shape(),
            out.heatmap.shape()
        )));
    }
    let (l_ct, mut d_heat) = center_focal_loss(&out.heatmap, &targets.heatmap, opts.focal)?;
    for (g, &p) in d_heat.data_mut().iter_mut().zip(out.heatmap.data()) {
        *g *= p * (1.0 - p);
    }

    let objs = &targets.objects;
    let at = |m: &FeatureMap, c: usize, o: &crate::boxloss::ObjectTarget| m.get(c, o.cell.1, o.cell.0);
    let pred_off: Vec<[f64; 2]> = objs.iter().map(|o| [at(&out.offset, 0, o), at(&out.offset, 1, o)]).collect();
    let gt_off: Vec<[f64; 2]> = objs.iter().map(|o| o.offset).collect();
    let weights: Vec<f64> = objs.iter().map(|o| o.weight).collect();
    let uniform = weights.iter().all(|&v| v == 1.0);
    let (l_off, g_off) = offset_l1_loss_weighted(&pred_off, &gt_off, (!uniform).then_some(weights.as_slice()))?;

    let mut batch = SizeBatch::new(
        objs.iter().map(|o| [at(&out.size, 0, o), at(&out.size, 1, o)]).collect(),
        objs.iter().map(|o| o.size).collect(),
        vec![true; objs.len()],
    )?;
    if !uniform {
        batch.weights = Some(weights);
    }
    let (l_size, g_size) = mgiou_loss(&batch, opts.size_norm)?;

    let loss = total_loss(l_ct, l_size, l_off, &opts.weights)?;

    let mut d_offset = FeatureMap::zeros(2, h, w);
    let mut d_size = FeatureMap::zeros(2, h, w);
    for (k, o) in objs.iter().enumerate() {
        let (x, y) = o.cell;
        for c in 0..2 {
            let i = d_offset.index(c, y, x);
            d_offset.data_mut()[i] += opts.weights.lambda_off * g_off[k][c];
            d_size.data_mut()[i] += opts.weights.lambda_size * g_size[k][c];
        }
    }
    Ok(LossGrads {
        loss,
        d_heat_logit: d_heat,
        d_offset,
        d_size,
    })
}
