//! Dense feature-map kernels with paired vector-Jacobian products.
//!
//! Every differentiable kernel here comes as a `forward`/`*_backward` pair. The
//! backward functions take the gradient of a scalar loss with respect to the
//! kernel output and return gradients with respect to the kernel inputs.
//! [`finite_diff_check`] compares such analytic gradients against central
//! differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense `channels x height x width` tensor stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    level: Option<i32>,
    data: Vec<f64>,
}

/// How to populate a freshly created [`FeatureMap`].
#[derive(Debug, Clone, PartialEq)]
pub enum Fill {
    Constant(f64),
    SeededUniform { lo: f64, hi: f64, seed: u64 },
    FromValues(Vec<f64>),
}

fn check_dims(channels: usize, height: usize, width: usize) -> Result<()> {
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::shape(format!(
            "feature map dimensions must be positive, got {channels}x{height}x{width}"
        )));
    }
    Ok(())
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, fill: Fill) -> Result<Self> {
        check_dims(channels, height, width)?;
        let len = channels * height * width;
        let data = match fill {
            Fill::Constant(c) => vec![c; len],
            Fill::SeededUniform { lo, hi, seed } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::Range(format!("uniform bounds [{lo}, {hi}]")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect()
            }
            Fill::FromValues(values) => {
                if values.len() != len {
                    return Err(Error::Length {
                        expected: len,
                        got: values.len(),
                    });
                }
                values
            }
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map fill".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            level: None,
            data,
        })
    }

    /// All-zero map. Panics on a zero dimension.
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(
            channels > 0 && height > 0 && width > 0,
            "zero-sized feature map {channels}x{height}x{width}"
        );
        Self {
            channels,
            height,
            width,
            level: None,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(channels, height, width, Fill::FromValues(data))
    }

    pub fn with_level(mut self, level: i32) -> Self {
        self.level = Some(level);
        self
    }

    pub fn level(&self) -> Option<i32> {
        self.level
    }

    pub fn set_level(&mut self, level: Option<i32>) {
        self.level = level;
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &FeatureMap, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Horizontal mirror: column `x` moves to `width - 1 - x`.
    pub fn mirror_x(&self) -> FeatureMap {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, self.width - 1 - x, self.get(c, y, x));
                }
            }
        }
        out
    }
}

impl AsRef<[f64]> for FeatureMap {
    fn as_ref(&self) -> &[f64] {
        &self.data
    }
}

impl AsMut<[f64]> for FeatureMap {
    fn as_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// A value together with the gradient accumulated for it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair<T = Vec<f64>> {
    pub value: T,
    pub grad: T,
}

impl<T> GradPair<T>
where
    T: Clone + AsRef<[f64]> + AsMut<[f64]>,
{
    pub fn new(value: T) -> Self {
        let mut grad = value.clone();
        grad.as_mut().fill(0.0);
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.as_mut().fill(0.0);
    }

    pub fn accumulate(&mut self, g: &[f64]) -> Result<()> {
        let grad = self.grad.as_mut();
        if grad.len() != g.len() {
            return Err(Error::Length {
                expected: grad.len(),
                got: g.len(),
            });
        }
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    /// `grad *= s`.
    pub fn scale_grad(&mut self, s: f64) {
        for g in self.grad.as_mut() {
            *g *= s;
        }
    }
}

/// Fully connected layer parameters: `out = weight * x + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub out_dim: usize,
    pub in_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineParams {
    pub fn new(out_dim: usize, in_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::shape(format!("affine dims {out_dim}x{in_dim}")));
        }
        if weight.len() != out_dim * in_dim {
            return Err(Error::Length {
                expected: out_dim * in_dim,
                got: weight.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::Length {
                expected: out_dim,
                got: bias.len(),
            });
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("affine parameters".into()));
        }
        Ok(Self {
            out_dim,
            in_dim,
            weight,
            bias,
        })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut p = Self::zeros(n, n);
        for i in 0..n {
            p.weight[i * n + i] = 1.0;
        }
        p
    }

    /// Weights uniform in `[-spread, spread]`, every bias set to `bias`.
    pub fn seeded(out_dim: usize, in_dim: usize, spread: f64, bias: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = (0..out_dim * in_dim)
            .map(|_| spread * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        Self {
            out_dim,
            in_dim,
            weight,
            bias: vec![bias; out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }
}

/// Gradients produced by [`affine_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrad {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Direction of a nearest-neighbour resize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resize {
    Up,
    Down,
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::shape(format!(
            "resize factor must be a power of two, got {factor}"
        )));
    }
    Ok(())
}

/// Nearest-neighbour resize by an integer power-of-two factor.
///
/// Up-sampling copies source pixel `(i / f, j / f)`; down-sampling keeps the
/// top-left pixel `(i * f, j * f)` of every `f x f` block.
pub fn resize_nearest(x: &FeatureMap, factor: usize, dir: Resize) -> Result<FeatureMap> {
    check_factor(factor)?;
    if factor == 1 {
        return Ok(x.clone());
    }
    let (c, h, w) = x.shape();
    match dir {
        Resize::Up => {
            let (oh, ow) = (h * factor, w * factor);
            let mut out = FeatureMap::zeros(c, oh, ow);
            for ch in 0..c {
                let src = x.channel(ch);
                let dst = out.channel_mut(ch);
                for i in 0..oh {
                    let srow = &src[(i / factor) * w..(i / factor + 1) * w];
                    let drow = &mut dst[i * ow..(i + 1) * ow];
                    for (j, d) in drow.iter_mut().enumerate() {
                        *d = srow[j / factor];
                    }
                }
            }
            out.level = x.level;
            Ok(out)
        }
        Resize::Down => {
            if h % factor != 0 || w % factor != 0 {
                return Err(Error::shape(format!(
                    "cannot downsize {h}x{w} by {factor}"
                )));
            }
            let (oh, ow) = (h / factor, w / factor);
            let mut out = FeatureMap::zeros(c, oh, ow);
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        out.set(ch, i, j, x.get(ch, i * factor, j * factor));
                    }
                }
            }
            out.level = x.level;
            Ok(out)
        }
    }
}

/// Backward of [`resize_nearest`]: maps the output gradient onto the input.
pub fn resize_nearest_backward(
    grad_out: &FeatureMap,
    factor: usize,
    dir: Resize,
) -> Result<FeatureMap> {
    check_factor(factor)?;
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let (c, oh, ow) = grad_out.shape();
    match dir {
        Resize::Up => {
            if oh % factor != 0 || ow % factor != 0 {
                return Err(Error::shape(format!(
                    "gradient {oh}x{ow} is not an x{factor} upsample"
                )));
            }
            let (h, w) = (oh / factor, ow / factor);
            let mut gin = FeatureMap::zeros(c, h, w);
            for ch in 0..c {
                let g = grad_out.channel(ch);
                let dst = gin.channel_mut(ch);
                for i in 0..oh {
                    for j in 0..ow {
                        dst[(i / factor) * w + j / factor] += g[i * ow + j];
                    }
                }
            }
            Ok(gin)
        }
        Resize::Down => {
            let mut gin = FeatureMap::zeros(c, oh * factor, ow * factor);
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        gin.set(ch, i * factor, j * factor, grad_out.get(ch, i, j));
                    }
                }
            }
            Ok(gin)
        }
    }
}

/// Per-channel spatial mean.
pub fn global_avg_pool(x: &FeatureMap) -> Vec<f64> {
    let n = x.plane_len() as f64;
    (0..x.channels())
        .map(|c| x.channel(c).iter().sum::<f64>() / n)
        .collect()
}

pub fn global_avg_pool_backward(
    grad_out: &[f64],
    height: usize,
    width: usize,
) -> Result<FeatureMap> {
    check_dims(grad_out.len(), height, width)?;
    let n = (height * width) as f64;
    let mut gin = FeatureMap::zeros(grad_out.len(), height, width);
    for (c, g) in grad_out.iter().enumerate() {
        gin.channel_mut(c).fill(g / n);
    }
    Ok(gin)
}

pub fn affine_map(x: &[f64], p: &AffineParams) -> Result<Vec<f64>> {
    if x.len() != p.in_dim {
        return Err(Error::shape(format!(
            "affine input has length {}, layer expects {}",
            x.len(),
            p.in_dim
        )));
    }
    Ok((0..p.out_dim)
        .map(|o| dot(p.row(o), x) + p.bias[o])
        .collect())
}

pub fn affine_backward(x: &[f64], p: &AffineParams, grad_out: &[f64]) -> Result<AffineGrad> {
    if x.len() != p.in_dim || grad_out.len() != p.out_dim {
        return Err(Error::shape(format!(
            "affine backward got input {} / grad {}, layer is {}x{}",
            x.len(),
            grad_out.len(),
            p.out_dim,
            p.in_dim
        )));
    }
    let mut input = vec![0.0; p.in_dim];
    let mut weight = vec![0.0; p.weight.len()];
    for (o, &g) in grad_out.iter().enumerate() {
        let row = p.row(o);
        let wrow = &mut weight[o * p.in_dim..(o + 1) * p.in_dim];
        for i in 0..p.in_dim {
            input[i] += g * row[i];
            wrow[i] = g * x[i];
        }
    }
    Ok(AffineGrad {
        input,
        weight,
        bias: grad_out.to_vec(),
    })
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Vector-Jacobian product of softmax, given its output `y`.
pub fn softmax_backward(y: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let inner = dot(y, grad_out);
    y.iter()
        .zip(grad_out)
        .map(|(yi, gi)| yi * (gi - inner))
        .collect()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub pass: bool,
    pub evaluation_error: Option<String>,
}

impl FdReport {
    fn failed(msg: String) -> Self {
        Self {
            max_rel_error: f64::INFINITY,
            worst_index: None,
            checked: 0,
            pass: false,
            evaluation_error: Some(msg),
        }
    }
}

/// Compare `analytic` against central differences of `f` at `params`.
///
/// The error for coordinate `i` is `|analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64, tol: f64) -> FdReport
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return FdReport::failed(format!("step must be positive, got {h}"));
    }
    if analytic.len() != params.len() {
        return FdReport::failed(format!(
            "analytic gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        ));
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    let mut worst_index = None;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return FdReport::failed(format!("non-finite objective at coordinate {i}"));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        if !a.is_finite() {
            return FdReport::failed(format!("non-finite analytic gradient at coordinate {i}"));
        }
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > worst || worst_index.is_none() {
            worst = worst.max(err);
            worst_index = Some(i);
        }
    }
    FdReport {
        max_rel_error: worst,
        worst_index,
        checked: x.len(),
        pass: worst <= tol,
        evaluation_error: None,
    }
}

/// Like [`finite_diff_check`], with the analytic gradient taken from `f` itself.
pub fn check_gradient<F>(mut f: F, params: &[f64], h: f64, tol: f64) -> FdReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (v, analytic) = f(params);
    if !v.is_finite() {
        return FdReport::failed("non-finite objective at the base point".into());
    }
    finite_diff_check(|p| f(p).0, params, &analytic, h, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(c: usize, h: usize, w: usize, v: &[f64]) -> FeatureMap {
        FeatureMap::from_vec(c, h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn create_fills() {
        let z = FeatureMap::new(1, 2, 2, Fill::Constant(0.0)).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let one = FeatureMap::new(1, 1, 1, Fill::FromValues(vec![5.0])).unwrap();
        assert_eq!(one.get(0, 0, 0), 5.0);
        let fill = Fill::SeededUniform {
            lo: 0.0,
            hi: 1.0,
            seed: 7,
        };
        let a = FeatureMap::new(2, 3, 3, fill.clone()).unwrap();
        let b = FeatureMap::new(2, 3, 3, fill).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn create_rejects_bad_shapes() {
        assert!(matches!(
            FeatureMap::new(0, 2, 2, Fill::Constant(1.0)),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            FeatureMap::new(1, 2, 2, Fill::FromValues(vec![1.0; 3])),
            Err(Error::Length {
                expected: 4,
                got: 3
            })
        ));
    }

    #[test]
    fn resize_examples() {
        let five = map(1, 1, 1, &[5.0]);
        let up = resize_nearest(&five, 2, Resize::Up).unwrap();
        assert_eq!(up.shape(), (1, 2, 2));
        assert_eq!(up.data(), &[5.0; 4]);

        let x = map(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let down = resize_nearest(&x, 2, Resize::Down).unwrap();
        assert_eq!(down.data(), &[1.0]);

        let same = resize_nearest(&x, 1, Resize::Down).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn resize_round_trip_and_lossy_counterexample() {
        let x = FeatureMap::new(
            2,
            3,
            5,
            Fill::SeededUniform {
                lo: -1.0,
                hi: 1.0,
                seed: 3,
            },
        )
        .unwrap();
        for f in [1, 2, 4] {
            let up = resize_nearest(&x, f, Resize::Up).unwrap();
            assert_eq!(resize_nearest(&up, f, Resize::Down).unwrap(), x);
        }
        // down then up loses the non-top-left pixels
        let x = map(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let back =
            resize_nearest(&resize_nearest(&x, 2, Resize::Down).unwrap(), 2, Resize::Up).unwrap();
        assert_eq!(back.data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_ne!(back, x);
    }

    #[test]
    fn resize_errors() {
        let x = map(1, 3, 2, &[0.0; 6]);
        assert!(resize_nearest(&x, 2, Resize::Down).is_err());
        assert!(resize_nearest(&x, 3, Resize::Up).is_err());
        assert!(resize_nearest(&x, 0, Resize::Up).is_err());
    }

    #[test]
    fn gap_examples() {
        let x = map(1, 2, 2, &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(global_avg_pool(&x), vec![4.0]);
        let c = FeatureMap::new(3, 4, 2, Fill::Constant(-2.5)).unwrap();
        assert_eq!(global_avg_pool(&c), vec![-2.5; 3]);

        let r = FeatureMap::new(
            3,
            4,
            4,
            Fill::SeededUniform {
                lo: -3.0,
                hi: 3.0,
                seed: 11,
            },
        )
        .unwrap();
        let pooled = global_avg_pool(&r);
        for ch in 0..3 {
            let mut s = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    s += r.get(ch, y, x);
                }
            }
            assert!((pooled[ch] - s / 16.0).abs() < 1e-14);
        }
    }

    #[test]
    fn gap_gradient_is_conserved() {
        let g = vec![0.3, -1.2, 4.0];
        let gin = global_avg_pool_backward(&g, 3, 5).unwrap();
        for (c, gc) in g.iter().enumerate() {
            let s: f64 = gin.channel(c).iter().sum();
            assert!((s - gc).abs() < 1e-14);
        }
    }

    #[test]
    fn affine_examples() {
        let id = AffineParams::identity(2);
        assert_eq!(affine_map(&[1.0, 2.0], &id).unwrap(), vec![1.0, 2.0]);

        let b = AffineParams::new(2, 3, vec![0.0; 6], vec![0.5, -1.0]).unwrap();
        assert_eq!(affine_map(&[9.0, 9.0, 9.0], &b).unwrap(), vec![0.5, -1.0]);

        let p = AffineParams::seeded(3, 2, 1.0, 0.25, 5);
        let x = [0.7, -1.3];
        let out = affine_map(&x, &p).unwrap();
        for o in 0..3 {
            let want = p.weight[o * 2] * x[0] + p.weight[o * 2 + 1] * x[1] + p.bias[o];
            assert!((out[o] - want).abs() < 1e-15);
        }
        assert!(affine_map(&[1.0], &p).is_err());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.0; 4]);
        assert!(u.iter().all(|v| (v - 0.25).abs() < 1e-15));

        let z: Vec<f64> = [1.0f64, 2.0, 3.0, 4.0].iter().map(|v| v.ln()).collect();
        let s = softmax(&z);
        for (got, want) in s.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((got - want).abs() < 1e-15);
        }

        let big = softmax(&[1000.0, 1000.0]);
        assert_eq!(big, vec![0.5, 0.5]);
    }

    #[test]
    fn fd_check_examples() {
        let sq = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let r = finite_diff_check(sq, &[1.0, 2.0], &[2.0, 4.0], 1e-5, 1e-9);
        assert!(r.pass, "{r:?}");

        let r = finite_diff_check(|_| 3.0, &[1.0, -2.0], &[0.0, 0.0], 1e-5, 1e-12);
        assert!(r.pass);
        assert_eq!(r.max_rel_error, 0.0);

        let r = finite_diff_check(sq, &[1.0, 2.0], &[4.0, 8.0], 1e-5, 1e-5);
        assert!(!r.pass);

        let r = finite_diff_check(|x: &[f64]| x[0].ln(), &[1e-7], &[1e7], 1e-5, 1e-5);
        assert!(!r.pass);
        assert!(r.evaluation_error.is_some());
    }

    #[test]
    fn grad_pair_accumulates() {
        let mut p = GradPair::new(vec![1.0, 2.0]);
        p.accumulate(&[0.5, 0.5]).unwrap();
        p.accumulate(&[0.5, -1.0]).unwrap();
        assert_eq!(p.grad, vec![1.0, -0.5]);
        p.scale_grad(2.0);
        assert_eq!(p.grad, vec![2.0, -1.0]);
        assert!(p.accumulate(&[1.0]).is_err());
        p.zero_grad();
        assert_eq!(p.grad, vec![0.0, 0.0]);
    }
}
