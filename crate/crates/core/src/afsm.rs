//! Adaptive feature selection across pyramid levels.
//!
//! Every level is resized to the target level with nearest interpolation,
//! a weight generator produces raw per-level, per-channel weights `beta`,
//! a softmax across levels turns them into `alpha`, and the output channel
//! `i` is `sum_l alpha[l][i] * resized[l][i]`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{
    affine_backward, affine_map, global_avg_pool, global_avg_pool_backward, resize_nearest,
    resize_nearest_backward, softmax, softmax_backward, AffineParams, FeatureMap, Resize,
};

/// Which pyramid levels are fused, and at which resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Level `l` has resolution `1 / 2^l` of the input image.
    pub levels: Vec<i32>,
    pub target_level: i32,
    pub channels: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: vec![3, 4, 5],
            target_level: 3,
            channels: 16,
        }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("pyramid channel count must be positive".into()));
        }
        let mut sorted = self.levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.levels.len() {
            return Err(Error::Config(format!(
                "pyramid levels must be distinct: {:?}",
                self.levels
            )));
        }
        if sorted[0] < 0 || sorted[sorted.len() - 1] > 16 {
            return Err(Error::Config(format!(
                "pyramid levels must lie in [0, 16]: {:?}",
                self.levels
            )));
        }
        if self.target_level < sorted[0] || self.target_level > sorted[sorted.len() - 1] {
            return Err(Error::Config(format!(
                "target level {} outside levels {:?}",
                self.target_level, self.levels
            )));
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn max_level(&self) -> i32 {
        self.levels.iter().copied().max().unwrap_or(0)
    }

    /// Spatial size of the level-`k` map for an input of the given size.
    pub fn target_shape(&self, input_h: usize, input_w: usize) -> Result<(usize, usize)> {
        let s = 1usize << self.target_level;
        if input_h % s != 0 || input_w % s != 0 {
            return Err(Error::shape(format!(
                "input {input_h}x{input_w} not divisible by 2^{}",
                self.target_level
            )));
        }
        Ok((input_h / s, input_w / s))
    }
}

/// How raw selection weights are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// A learnable `m x d` table, input independent.
    V1,
    /// Per-level pooled features through a per-level `d -> d` affine layer.
    V2,
    /// Concatenated pooled features through one `m*d -> m*d` affine layer.
    V3,
}

/// Learnable source of `beta`.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightGenerator {
    V1 {
        levels: usize,
        channels: usize,
        /// Level-major `levels x channels`.
        beta: Vec<f64>,
    },
    V2 {
        affines: Vec<AffineParams>,
    },
    V3 {
        levels: usize,
        channels: usize,
        affine: AffineParams,
    },
}

const AFFINE_INIT_SPREAD: f64 = 0.05;
const AFFINE_INIT_BIAS: f64 = 1.0;

impl WeightGenerator {
    pub fn new(variant: Variant, levels: usize, channels: usize, seed: u64) -> Result<Self> {
        if levels == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "weight generator needs positive sizes, got m={levels} d={channels}"
            )));
        }
        Ok(match variant {
            Variant::V1 => WeightGenerator::V1 {
                levels,
                channels,
                beta: vec![1.0; levels * channels],
            },
            Variant::V2 => WeightGenerator::V2 {
                affines: (0..levels)
                    .map(|l| {
                        AffineParams::seeded(
                            channels,
                            channels,
                            AFFINE_INIT_SPREAD,
                            AFFINE_INIT_BIAS,
                            seed.wrapping_add(l as u64),
                        )
                    })
                    .collect(),
            },
            Variant::V3 => WeightGenerator::V3 {
                levels,
                channels,
                affine: AffineParams::seeded(
                    levels * channels,
                    levels * channels,
                    AFFINE_INIT_SPREAD,
                    AFFINE_INIT_BIAS,
                    seed,
                ),
            },
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            WeightGenerator::V1 { .. } => Variant::V1,
            WeightGenerator::V2 { .. } => Variant::V2,
            WeightGenerator::V3 { .. } => Variant::V3,
        }
    }

    pub fn num_levels(&self) -> usize {
        match self {
            WeightGenerator::V1 { levels, .. } | WeightGenerator::V3 { levels, .. } => *levels,
            WeightGenerator::V2 { affines } => affines.len(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            WeightGenerator::V1 { channels, .. } | WeightGenerator::V3 { channels, .. } => {
                *channels
            }
            WeightGenerator::V2 { affines } => affines.first().map_or(0, |a| a.in_dim),
        }
    }

    /// Named parameter blocks in canonical order.
    pub fn param_sections(&self) -> Vec<(String, &[f64])> {
        match self {
            WeightGenerator::V1 { beta, .. } => vec![("afsm.v1.beta".into(), beta.as_slice())],
            WeightGenerator::V2 { affines } => affines
                .iter()
                .enumerate()
                .flat_map(|(l, a)| {
                    [
                        (format!("afsm.v2.{l}.weight"), a.weight.as_slice()),
                        (format!("afsm.v2.{l}.bias"), a.bias.as_slice()),
                    ]
                })
                .collect(),
            WeightGenerator::V3 { affine, .. } => vec![
                ("afsm.v3.weight".into(), affine.weight.as_slice()),
                ("afsm.v3.bias".into(), affine.bias.as_slice()),
            ],
        }
    }

    /// Mutable views matching [`Self::param_sections`] order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            WeightGenerator::V1 { beta, .. } => vec![beta.as_mut_slice()],
            WeightGenerator::V2 { affines } => affines
                .iter_mut()
                .flat_map(|a| [a.weight.as_mut_slice(), a.bias.as_mut_slice()])
                .collect(),
            WeightGenerator::V3 { affine, .. } => {
                vec![affine.weight.as_mut_slice(), affine.bias.as_mut_slice()]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_sections().iter().map(|(_, s)| s.len()).sum()
    }

    fn check_inputs(&self, xhat: &[FeatureMap]) -> Result<()> {
        let (m, d) = (self.num_levels(), self.channels());
        if xhat.len() != m {
            return Err(Error::shape(format!(
                "generator expects {m} levels, got {}",
                xhat.len()
            )));
        }
        if let Some(bad) = xhat.iter().find(|x| x.channels() != d) {
            return Err(Error::shape(format!(
                "generator expects {d} channels, got {}",
                bad.channels()
            )));
        }
        Ok(())
    }
}

/// Raw and normalized selection weights, indexed `[level][channel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionWeights {
    pub beta: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
}

impl SelectionWeights {
    pub fn num_levels(&self) -> usize {
        self.alpha.len()
    }

    pub fn channels(&self) -> usize {
        self.alpha.first().map_or(0, Vec::len)
    }

    /// Mean of `alpha` over channels, one value per level.
    pub fn mean_alpha(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .map(|a| a.iter().sum::<f64>() / a.len() as f64)
            .collect()
    }

    /// Largest `|sum_l alpha[l][i] - 1|` over channels.
    pub fn max_normalization_error(&self) -> f64 {
        (0..self.channels())
            .map(|i| (self.alpha.iter().map(|a| a[i]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// How one level is brought to the target resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizeStep {
    pub factor: usize,
    pub dir: Resize,
}

fn resize_plan(xs: &[FeatureMap], cfg: &PyramidConfig) -> Result<Vec<ResizeStep>> {
    cfg.validate()?;
    if xs.len() != cfg.levels.len() {
        return Err(Error::shape(format!(
            "pyramid has {} maps for {} levels",
            xs.len(),
            cfg.levels.len()
        )));
    }
    let mut input_res: Option<(usize, usize)> = None;
    for (x, &l) in xs.iter().zip(&cfg.levels) {
        if x.channels() != cfg.channels {
            return Err(Error::shape(format!(
                "level {l} has {} channels, expected {}",
                x.channels(),
                cfg.channels
            )));
        }
        if let Some(tag) = x.level() {
            if tag != l {
                return Err(Error::shape(format!(
                    "map tagged level {tag} in slot for level {l}"
                )));
            }
        }
        let res = (x.height() << l, x.width() << l);
        match input_res {
            None => input_res = Some(res),
            Some(r) if r != res => {
                return Err(Error::shape(format!(
                    "level {l} map {}x{} implies input {}x{}, other levels imply {}x{}",
                    x.height(),
                    x.width(),
                    res.0,
                    res.1,
                    r.0,
                    r.1
                )))
            }
            _ => {}
        }
    }
    let (ih, iw) = input_res.expect("at least one level");
    cfg.target_shape(ih, iw)?;
    Ok(cfg
        .levels
        .iter()
        .map(|&l| {
            let factor = 1usize << (l - cfg.target_level).unsigned_abs();
            let dir = if l > cfg.target_level {
                Resize::Up
            } else {
                Resize::Down
            };
            ResizeStep { factor, dir }
        })
        .collect())
}

/// Resize every level to the target level's resolution by a factor of `2^|l - k|`.
pub fn resize_all_to_target(xs: &[FeatureMap], cfg: &PyramidConfig) -> Result<Vec<FeatureMap>> {
    let plan = resize_plan(xs, cfg)?;
    xs.iter()
        .zip(&plan)
        .map(|(x, step)| {
            let mut out = resize_nearest(x, step.factor, step.dir)?;
            out.set_level(Some(cfg.target_level));
            Ok(out)
        })
        .collect()
}

fn generate_beta_traced(
    gen: &WeightGenerator,
    xhat: &[FeatureMap],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    gen.check_inputs(xhat)?;
    match gen {
        WeightGenerator::V1 {
            levels,
            channels,
            beta,
        } => Ok((
            (0..*levels)
                .map(|l| beta[l * channels..(l + 1) * channels].to_vec())
                .collect(),
            Vec::new(),
        )),
        WeightGenerator::V2 { affines } => {
            let pooled: Vec<Vec<f64>> = xhat.iter().map(global_avg_pool).collect();
            let beta = pooled
                .iter()
                .zip(affines)
                .map(|(p, a)| affine_map(p, a))
                .collect::<Result<_>>()?;
            Ok((beta, pooled))
        }
        WeightGenerator::V3 {
            levels,
            channels,
            affine,
        } => {
            let pooled: Vec<Vec<f64>> = xhat.iter().map(global_avg_pool).collect();
            let concat: Vec<f64> = pooled.concat();
            let gamma = affine_map(&concat, affine)?;
            let beta = (0..*levels)
                .map(|l| gamma[l * channels..(l + 1) * channels].to_vec())
                .collect();
            Ok((beta, pooled))
        }
    }
}

/// Raw weights `beta[level][channel]` from the generator.
pub fn generate_beta(gen: &WeightGenerator, xhat: &[FeatureMap]) -> Result<Vec<Vec<f64>>> {
    generate_beta_traced(gen, xhat).map(|(b, _)| b)
}

/// Weights produced for all-zero pooled features. For V1 this is the learned
/// table itself; for V2 and V3 it reduces to the generator biases.
pub fn resting_weights(gen: &WeightGenerator) -> Result<SelectionWeights> {
    let zeros: Vec<FeatureMap> = (0..gen.num_levels())
        .map(|_| FeatureMap::zeros(gen.channels(), 1, 1))
        .collect();
    normalize_weights(generate_beta(gen, &zeros)?)
}

/// Softmax across levels, independently for every channel.
pub fn normalize_weights(beta: Vec<Vec<f64>>) -> Result<SelectionWeights> {
    let m = beta.len();
    if m == 0 {
        return Err(Error::shape("no levels to normalize"));
    }
    let d = beta[0].len();
    if beta.iter().any(|b| b.len() != d) {
        return Err(Error::shape("beta vectors differ in length"));
    }
    if beta.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("selection weight beta".into()));
    }
    let mut alpha = vec![vec![0.0; d]; m];
    let mut column = vec![0.0; m];
    for i in 0..d {
        for l in 0..m {
            column[l] = beta[l][i];
        }
        for (l, a) in softmax(&column).into_iter().enumerate() {
            alpha[l][i] = a;
        }
    }
    Ok(SelectionWeights { beta, alpha })
}

/// Gradient with respect to `beta` given a gradient with respect to `alpha`.
pub fn normalize_weights_backward(w: &SelectionWeights, d_alpha: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, d) = (w.num_levels(), w.channels());
    let mut d_beta = vec![vec![0.0; d]; m];
    let mut a = vec![0.0; m];
    let mut g = vec![0.0; m];
    for i in 0..d {
        for l in 0..m {
            a[l] = w.alpha[l][i];
            g[l] = d_alpha[l][i];
        }
        for (l, v) in softmax_backward(&a, &g).into_iter().enumerate() {
            d_beta[l][i] = v;
        }
    }
    d_beta
}

fn check_fusable(xhat: &[FeatureMap], w: &SelectionWeights) -> Result<()> {
    if xhat.is_empty() || xhat.len() != w.num_levels() {
        return Err(Error::shape(format!(
            "{} maps for {} weight levels",
            xhat.len(),
            w.num_levels()
        )));
    }
    let shape = xhat[0].shape();
    if xhat.iter().any(|x| x.shape() != shape) {
        return Err(Error::shape("resized levels differ in shape"));
    }
    if shape.0 != w.channels() {
        return Err(Error::shape(format!(
            "maps have {} channels, weights have {}",
            shape.0,
            w.channels()
        )));
    }
    Ok(())
}

/// `Y_i(p) = sum_l alpha[l][i] * xhat[l]_i(p)`.
pub fn fuse_levels(xhat: &[FeatureMap], w: &SelectionWeights) -> Result<FeatureMap> {
    check_fusable(xhat, w)?;
    let (d, h, wd) = xhat[0].shape();
    let mut y = FeatureMap::zeros(d, h, wd);
    for (l, x) in xhat.iter().enumerate() {
        for i in 0..d {
            let a = w.alpha[l][i];
            for (o, v) in y.channel_mut(i).iter_mut().zip(x.channel(i)) {
                *o += a * v;
            }
        }
    }
    if let Some(level) = xhat[0].level() {
        y.set_level(Some(level));
    }
    Ok(y)
}

/// Gradients of [`fuse_levels`]: `(d_xhat, d_alpha)`.
pub fn fuse_levels_backward(
    xhat: &[FeatureMap],
    w: &SelectionWeights,
    grad_y: &FeatureMap,
) -> Result<(Vec<FeatureMap>, Vec<Vec<f64>>)> {
    check_fusable(xhat, w)?;
    if grad_y.shape() != xhat[0].shape() {
        return Err(Error::shape("fused gradient shape mismatch"));
    }
    let (d, h, wd) = grad_y.shape();
    let mut d_xhat = Vec::with_capacity(xhat.len());
    let mut d_alpha = vec![vec![0.0; d]; xhat.len()];
    for (l, x) in xhat.iter().enumerate() {
        let mut gx = FeatureMap::zeros(d, h, wd);
        for i in 0..d {
            let a = w.alpha[l][i];
            let gy = grad_y.channel(i);
            d_alpha[l][i] = crate::numkit::dot(x.channel(i), gy);
            for (o, g) in gx.channel_mut(i).iter_mut().zip(gy) {
                *o = a * g;
            }
        }
        d_xhat.push(gx);
    }
    Ok((d_xhat, d_alpha))
}

/// Intermediate values of one AFSM forward pass, needed for the backward pass.
#[derive(Debug, Clone)]
pub struct AfsmTrace {
    plan: Vec<ResizeStep>,
    resized: Vec<FeatureMap>,
    pooled: Vec<Vec<f64>>,
    pub weights: SelectionWeights,
}

impl AfsmTrace {
    pub fn resized(&self) -> &[FeatureMap] {
        &self.resized
    }
}

/// Gradients of an AFSM forward pass.
#[derive(Debug, Clone)]
pub struct AfsmGrad {
    /// Flat, in [`WeightGenerator::param_sections`] order.
    pub generator: Vec<f64>,
    /// One map per input level, at the input resolution.
    pub inputs: Vec<FeatureMap>,
}

/// Resize, generate `beta`, normalize, fuse. Returns the fused map and the weights used.
pub fn afsm_forward(
    xs: &[FeatureMap],
    gen: &WeightGenerator,
    cfg: &PyramidConfig,
) -> Result<(FeatureMap, SelectionWeights)> {
    let (y, trace) = afsm_forward_traced(xs, gen, cfg)?;
    Ok((y, trace.weights))
}

pub fn afsm_forward_traced(
    xs: &[FeatureMap],
    gen: &WeightGenerator,
    cfg: &PyramidConfig,
) -> Result<(FeatureMap, AfsmTrace)> {
    let plan = resize_plan(xs, cfg)?;
    if gen.num_levels() != cfg.num_levels() || gen.channels() != cfg.channels {
        return Err(Error::shape(format!(
            "generator is {}x{}, pyramid is {}x{}",
            gen.num_levels(),
            gen.channels(),
            cfg.num_levels(),
            cfg.channels
        )));
    }
    let resized = resize_all_to_target(xs, cfg)?;
    let (beta, pooled) = generate_beta_traced(gen, &resized)?;
    let weights = normalize_weights(beta)?;
    let y = fuse_levels(&resized, &weights)?;
    Ok((
        y,
        AfsmTrace {
            plan,
            resized,
            pooled,
            weights,
        },
    ))
}

pub fn afsm_backward(
    trace: &AfsmTrace,
    gen: &WeightGenerator,
    grad_y: &FeatureMap,
) -> Result<AfsmGrad> {
    let (mut d_xhat, d_alpha) = fuse_levels_backward(&trace.resized, &trace.weights, grad_y)?;
    let d_beta = normalize_weights_backward(&trace.weights, &d_alpha);
    let (_, h, w) = grad_y.shape();

    let generator = match gen {
        WeightGenerator::V1 { .. } => d_beta.concat(),
        WeightGenerator::V2 { affines } => {
            let mut flat = Vec::with_capacity(gen.param_count());
            for (l, a) in affines.iter().enumerate() {
                let g = affine_backward(&trace.pooled[l], a, &d_beta[l])?;
                flat.extend_from_slice(&g.weight);
                flat.extend_from_slice(&g.bias);
                let gp = global_avg_pool_backward(&g.input, h, w)?;
                d_xhat[l].add_scaled(&gp, 1.0)?;
            }
            flat
        }
        WeightGenerator::V3 {
            channels, affine, ..
        } => {
            let concat = trace.pooled.concat();
            let g = affine_backward(&concat, affine, &d_beta.concat())?;
            for (l, dx) in d_xhat.iter_mut().enumerate() {
                let gp = global_avg_pool_backward(&g.input[l * channels..(l + 1) * channels], h, w)?;
                dx.add_scaled(&gp, 1.0)?;
            }
            let mut flat = g.weight;
            flat.extend_from_slice(&g.bias);
            flat
        }
    };

    let inputs = d_xhat
        .iter()
        .zip(&trace.plan)
        .map(|(g, step)| resize_nearest_backward(g, step.factor, step.dir))
        .collect::<Result<_>>()?;
    Ok(AfsmGrad { generator, inputs })
}

/// Write `level,channel,beta,alpha` rows, one per (level, channel) pair.
pub fn write_weights_csv<W: Write>(
    w: &SelectionWeights,
    level_ids: &[i32],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "level,channel,beta,alpha")?;
    for (l, (beta, alpha)) in w.beta.iter().zip(&w.alpha).enumerate() {
        let level = level_ids.get(l).copied().unwrap_or(l as i32);
        for (i, (b, a)) in beta.iter().zip(alpha).enumerate() {
            writeln!(out, "{level},{i},{b},{a}")?;
        }
    }
    Ok(())
}

/// Parse the output of [`write_weights_csv`]; returns level ids and weights.
pub fn read_weights_csv<R: BufRead>(input: R) -> Result<(Vec<i32>, SelectionWeights)> {
    let parse_err = |line: usize, message: String| Error::Parse {
        context: format!("weights csv line {line}"),
        message,
    };
    let mut levels: Vec<i32> = Vec::new();
    let mut beta: Vec<Vec<f64>> = Vec::new();
    let mut alpha: Vec<Vec<f64>> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| parse_err(n + 1, e.to_string()))?;
        if n == 0 {
            if line.trim() != "level,channel,beta,alpha" {
                return Err(parse_err(1, format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(n + 1, format!("expected 4 fields, got {}", fields.len())));
        }
        let level: i32 = fields[0].parse().map_err(|e| parse_err(n + 1, format!("{e}")))?;
        let channel: usize = fields[1].parse().map_err(|e| parse_err(n + 1, format!("{e}")))?;
        let b: f64 = fields[2].parse().map_err(|e| parse_err(n + 1, format!("{e}")))?;
        let a: f64 = fields[3].parse().map_err(|e| parse_err(n + 1, format!("{e}")))?;
        if levels.last() != Some(&level) {
            levels.push(level);
            beta.push(Vec::new());
            alpha.push(Vec::new());
        }
        let l = levels.len() - 1;
        if channel != beta[l].len() {
            return Err(parse_err(n + 1, format!("channel {channel} out of order")));
        }
        beta[l].push(b);
        alpha[l].push(a);
    }
    Ok((levels, SelectionWeights { beta, alpha }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{check_gradient, Fill};

    fn constant(d: usize, h: usize, w: usize, v: f64, level: i32) -> FeatureMap {
        FeatureMap::new(d, h, w, Fill::Constant(v)).unwrap().with_level(level)
    }

    fn seeded(d: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        FeatureMap::new(
            d,
            h,
            w,
            Fill::SeededUniform {
                lo: -1.0,
                hi: 1.0,
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn resize_single_level_is_identity() {
        let cfg = PyramidConfig {
            levels: vec![3],
            target_level: 3,
            channels: 2,
        };
        let x = seeded(2, 4, 4, 1);
        let out = resize_all_to_target(std::slice::from_ref(&x), &cfg).unwrap();
        assert_eq!(out[0].data(), x.data());
    }

    #[test]
    fn resize_replicates_coarse_constant() {
        let cfg = PyramidConfig {
            levels: vec![3, 4],
            target_level: 3,
            channels: 1,
        };
        let xs = vec![constant(1, 2, 2, 0.0, 3), constant(1, 1, 1, 5.0, 4)];
        let out = resize_all_to_target(&xs, &cfg).unwrap();
        assert_eq!(out[1].shape(), (1, 2, 2));
        assert_eq!(out[1].data(), &[5.0; 4]);
    }

    #[test]
    fn resize_middle_target() {
        let cfg = PyramidConfig {
            levels: vec![3, 4, 5],
            target_level: 4,
            channels: 2,
        };
        let xs = vec![seeded(2, 8, 8, 1), seeded(2, 4, 4, 2), seeded(2, 2, 2, 3)];
        let out = resize_all_to_target(&xs, &cfg).unwrap();
        assert!(out.iter().all(|x| x.shape() == (2, 4, 4)));
        assert_eq!(out[1].data(), xs[1].data());
        assert_eq!(out[0].get(1, 1, 2), xs[0].get(1, 2, 4));
        assert_eq!(out[2].get(0, 3, 1), xs[2].get(0, 1, 0));
    }

    #[test]
    fn resize_rejects_inconsistent_levels() {
        let cfg = PyramidConfig {
            levels: vec![3, 4],
            target_level: 3,
            channels: 1,
        };
        let xs = vec![constant(1, 4, 4, 0.0, 3), constant(1, 1, 1, 0.0, 4)];
        assert!(matches!(
            resize_all_to_target(&xs, &cfg),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn v1_initial_beta_is_ones() {
        let gen = WeightGenerator::new(Variant::V1, 3, 4, 0).unwrap();
        let xs: Vec<_> = (0..3).map(|s| seeded(4, 2, 2, s)).collect();
        let beta = generate_beta(&gen, &xs).unwrap();
        assert!(beta.iter().flatten().all(|&b| b == 1.0));
        let w = resting_weights(&gen).unwrap();
        assert!(w.alpha.iter().flatten().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn v2_zero_weights_return_bias() {
        let affines = (0..2)
            .map(|l| AffineParams::new(3, 3, vec![0.0; 9], vec![l as f64 + 0.5; 3]).unwrap())
            .collect();
        let gen = WeightGenerator::V2 { affines };
        let xs = vec![seeded(3, 2, 2, 9), seeded(3, 2, 2, 10)];
        let beta = generate_beta(&gen, &xs).unwrap();
        assert_eq!(beta, vec![vec![0.5; 3], vec![1.5; 3]]);
    }

    #[test]
    fn v3_identity_on_constants() {
        let gen = WeightGenerator::V3 {
            levels: 3,
            channels: 2,
            affine: AffineParams::identity(6),
        };
        let xs: Vec<_> = [2.0, -1.0, 0.5]
            .iter()
            .map(|&c| FeatureMap::new(2, 3, 3, Fill::Constant(c)).unwrap())
            .collect();
        let beta = generate_beta(&gen, &xs).unwrap();
        assert_eq!(beta, vec![vec![2.0; 2], vec![-1.0; 2], vec![0.5; 2]]);
    }

    #[test]
    fn generator_rejects_mismatch() {
        let gen = WeightGenerator::new(Variant::V2, 2, 3, 0).unwrap();
        assert!(generate_beta(&gen, &[seeded(3, 2, 2, 0)]).is_err());
        assert!(generate_beta(&gen, &[seeded(2, 2, 2, 0), seeded(2, 2, 2, 1)]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let w = normalize_weights(vec![vec![1.0; 5]; 4]).unwrap();
        assert!(w.alpha.iter().flatten().all(|&a| (a - 0.25).abs() < 1e-15));

        let w = normalize_weights(vec![vec![3.7, -2.0]]).unwrap();
        assert_eq!(w.alpha, vec![vec![1.0, 1.0]]);

        let beta: Vec<Vec<f64>> = [1.0f64, 2.0, 3.0, 4.0]
            .iter()
            .map(|v| vec![v.ln(); 2])
            .collect();
        let w = normalize_weights(beta).unwrap();
        for (l, want) in [0.1, 0.2, 0.3, 0.4].iter().enumerate() {
            assert!((w.alpha[l][0] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_examples() {
        let x = seeded(2, 3, 3, 4);
        let w = normalize_weights(vec![vec![0.3, -0.7]]).unwrap();
        assert_eq!(fuse_levels(std::slice::from_ref(&x), &w).unwrap().data(), x.data());

        let w = normalize_weights(vec![vec![0.9, 2.0], vec![-0.4, 0.1]]).unwrap();
        let y = fuse_levels(&[x.clone(), x.clone()], &w).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }

        let w = SelectionWeights {
            beta: vec![vec![0.0], vec![3f64.ln()]],
            alpha: vec![vec![0.25], vec![0.75]],
        };
        let xs = vec![
            FeatureMap::new(1, 2, 2, Fill::Constant(2.0)).unwrap(),
            FeatureMap::new(1, 2, 2, Fill::Constant(6.0)).unwrap(),
        ];
        assert_eq!(fuse_levels(&xs, &w).unwrap().data(), &[5.0; 4]);
    }

    #[test]
    fn fuse_rejects_mismatch() {
        let w = normalize_weights(vec![vec![0.0; 2], vec![0.0; 2]]).unwrap();
        assert!(fuse_levels(&[seeded(2, 2, 2, 0), seeded(2, 3, 2, 1)], &w).is_err());
        assert!(fuse_levels(&[seeded(2, 2, 2, 0)], &w).is_err());
    }

    #[test]
    fn forward_uniform_and_deterministic() {
        let cfg = PyramidConfig {
            levels: vec![3, 4, 5],
            target_level: 3,
            channels: 4,
        };
        let gen = WeightGenerator::new(Variant::V1, 3, 4, 0).unwrap();
        let xs = vec![
            constant(4, 4, 4, 1.5, 3),
            constant(4, 2, 2, 1.5, 4),
            constant(4, 1, 1, 1.5, 5),
        ];
        let (y, _) = afsm_forward(&xs, &gen, &cfg).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.5).abs() < 1e-15));

        let xs = vec![seeded(4, 4, 4, 1), seeded(4, 2, 2, 2), seeded(4, 1, 1, 3)];
        let a = afsm_forward(&xs, &gen, &cfg).unwrap();
        let b = afsm_forward(&xs, &gen, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    fn set_params(gen: &mut WeightGenerator, flat: &[f64]) {
        let mut off = 0;
        for s in gen.param_slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    fn flat_params(gen: &WeightGenerator) -> Vec<f64> {
        gen.param_sections().iter().flat_map(|(_, s)| s.to_vec()).collect()
    }

    #[test]
    fn v1_beta_gradient_matches_finite_differences() {
        let cfg = PyramidConfig {
            levels: vec![3, 4],
            target_level: 3,
            channels: 3,
        };
        let xs = vec![seeded(3, 4, 4, 5), seeded(3, 2, 2, 6)];
        let probe = seeded(3, 4, 4, 7);
        let mut gen = WeightGenerator::new(Variant::V1, 2, 3, 0).unwrap();
        set_params(&mut gen, &[0.3, -0.2, 1.1, 0.7, 0.0, -0.5]);
        let p0 = flat_params(&gen);
        let report = check_gradient(
            |p| {
                let mut g = gen.clone();
                set_params(&mut g, p);
                let (y, trace) = afsm_forward_traced(&xs, &g, &cfg).unwrap();
                let loss = crate::numkit::dot(y.data(), probe.data());
                let grad = afsm_backward(&trace, &g, &probe).unwrap();
                (loss, grad.generator)
            },
            &p0,
            1e-5,
            1e-5,
        );
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn weights_csv_round_trip() {
        let w = normalize_weights(vec![vec![0.1, 0.2], vec![-1.0, 3.5], vec![0.0, 0.0]]).unwrap();
        let mut buf = Vec::new();
        write_weights_csv(&w, &[3, 4, 5], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("level,channel,beta,alpha\n3,0,0.1,"));
        assert_eq!(text.lines().count(), 7);
        let (levels, back) = read_weights_csv(buf.as_slice()).unwrap();
        assert_eq!(levels, vec![3, 4, 5]);
        assert_eq!(back, w);
    }
}
