//! Training data: class-aware sampling, mixup, geometric augmentation,
//! synthetic datasets and the dataset file format.

use std::collections::BTreeSet;
use std::path::Path;

use base64::Engine as _;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Normal};
use serde::{Deserialize, Serialize};

use crate::boxloss::BBox;
use crate::error::{Error, Result};
use crate::fsio;
use crate::numkit::FeatureMap;
use crate::seed;

/// An image with its box annotations. Labels are one-based class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: FeatureMap,
    pub boxes: Vec<BBox>,
    pub labels: Vec<u32>,
    /// Per-box loss weights; `None` means every box weighs 1.
    pub weights: Option<Vec<f64>>,
}

const BOUNDS_SLACK: f64 = 1e-9;

impl AnnotatedImage {
    pub fn new(id: impl Into<String>, image: FeatureMap, boxes: Vec<BBox>, labels: Vec<u32>) -> Result<Self> {
        let img = Self {
            id: id.into(),
            image,
            boxes,
            labels,
            weights: None,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(Error::Length {
                expected: self.boxes.len(),
                got: self.labels.len(),
            });
        }
        if let Some(w) = &self.weights {
            if w.len() != self.boxes.len() {
                return Err(Error::Length {
                    expected: self.boxes.len(),
                    got: w.len(),
                });
            }
        }
        if self.labels.contains(&0) {
            return Err(Error::Label(format!("image {}: labels are one-based", self.id)));
        }
        let (w, h) = (self.width() as f64, self.height() as f64);
        for b in &self.boxes {
            b.validate()?;
            if b.x1 < -BOUNDS_SLACK || b.y1 < -BOUNDS_SLACK || b.x2 > w + BOUNDS_SLACK || b.y2 > h + BOUNDS_SLACK {
                return Err(Error::InvalidBox(format!(
                    "image {}: box {b:?} outside {w}x{h}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Normalized per-image sampling ratios and the per-class instance counts they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingTable {
    pub ratios: Vec<f64>,
    /// `class_counts[k - 1]` is the number of class-`k` objects.
    pub class_counts: Vec<usize>,
}

impl SamplingTable {
    /// Equal ratios, for training without class-aware sampling.
    pub fn uniform(n: usize) -> Self {
        Self {
            ratios: vec![1.0 / n as f64; n],
            class_counts: Vec::new(),
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "image,ratio")?;
        for (i, r) in self.ratios.iter().enumerate() {
            writeln!(out, "{i},{r}")?;
        }
        Ok(())
    }
}

/// Class-aware sampling ratios.
///
/// With `M(k)` the number of class-`k` objects in the dataset, image `i`
/// scores `sum over distinct classes k in image i of 1 / M(k)`; scores are
/// normalized to sum to one.
pub fn casm_ratios(labels: &[Vec<u32>], num_classes: usize) -> Result<SamplingTable> {
    casm_ratios_with_floor(labels, num_classes, 0.0)
}

/// [`casm_ratios`], with each unnormalized score raised to at least `floor`.
pub fn casm_ratios_with_floor(
    labels: &[Vec<u32>],
    num_classes: usize,
    floor: f64,
) -> Result<SamplingTable> {
    if !(floor >= 0.0 && floor.is_finite()) {
        return Err(Error::Config(format!("sampling floor must be >= 0, got {floor}")));
    }
    let mut counts = vec![0usize; num_classes];
    for (i, g) in labels.iter().enumerate() {
        for &c in g {
            if c == 0 || c as usize > num_classes {
                return Err(Error::Label(format!(
                    "image {i}: label {c} outside [1, {num_classes}]"
                )));
            }
            counts[c as usize - 1] += 1;
        }
    }
    let scores: Vec<f64> = labels
        .iter()
        .map(|g| {
            g.iter()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .map(|&c| 1.0 / counts[c as usize - 1] as f64)
                .sum::<f64>()
        })
        .collect();
    if scores.iter().all(|&s| s == 0.0) {
        return Err(Error::DegenerateDataset(
            "no image contains an annotated object".into(),
        ));
    }
    let scores: Vec<f64> = scores.into_iter().map(|s| s.max(floor)).collect();
    let total: f64 = scores.iter().sum();
    Ok(SamplingTable {
        ratios: scores.into_iter().map(|s| s / total).collect(),
        class_counts: counts,
    })
}

/// `count` i.i.d. draws with replacement, index `i` with probability `ratios[i]`.
pub fn draw_samples(table: &SamplingTable, count: usize, seed: u64) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(&table.ratios)
        .map_err(|e| Error::DegenerateDataset(format!("sampling table: {e}")))?;
    let mut rng = seed::rng(seed);
    Ok((0..count).map(|_| dist.sample(&mut rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixupConfig {
    /// Shape parameter of the symmetric Beta distribution.
    pub eta: f64,
    pub enabled: bool,
    /// Weight each source's boxes by its blend coefficient instead of 1.
    pub weight_by_lambda: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            enabled: false,
            weight_by_lambda: false,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("mixup eta must be > 0, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Draw `lambda_1 ~ Beta(eta, eta)` and its clamp `lambda_2 = min(max(0, lambda_1), 1)`.
pub fn mixup_lambda(cfg: &MixupConfig, seed: u64) -> Result<(f64, f64)> {
    cfg.validate()?;
    let beta = Beta::new(cfg.eta, cfg.eta).map_err(|e| Error::Config(format!("beta: {e}")))?;
    let l1: f64 = beta.sample(&mut seed::rng(seed));
    Ok((l1, l1.clamp(0.0, 1.0)))
}

/// Blend two images with a fixed coefficient; boxes of both are kept.
pub fn mixup_with_lambda(
    a: &AnnotatedImage,
    b: &AnnotatedImage,
    lambda: f64,
    weight_by_lambda: bool,
) -> Result<AnnotatedImage> {
    if a.image.shape() != b.image.shape() {
        return Err(Error::shape(format!(
            "mixup of {:?} and {:?}",
            a.image.shape(),
            b.image.shape()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Range(format!("mixup coefficient {lambda}")));
    }
    let mut image = a.image.clone();
    for (o, (x, y)) in image
        .data_mut()
        .iter_mut()
        .zip(a.image.data().iter().zip(b.image.data()))
    {
        *o = lambda * x + (1.0 - lambda) * y;
    }
    let mut boxes = a.boxes.clone();
    boxes.extend_from_slice(&b.boxes);
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);

    let base = |img: &AnnotatedImage| img.weights.clone().unwrap_or_else(|| vec![1.0; img.boxes.len()]);
    let weights = if weight_by_lambda {
        let mut w: Vec<f64> = base(a).into_iter().map(|v| v * lambda).collect();
        w.extend(base(b).into_iter().map(|v| v * (1.0 - lambda)));
        Some(w)
    } else if a.weights.is_some() || b.weights.is_some() {
        let mut w = base(a);
        w.extend(base(b));
        Some(w)
    } else {
        None
    };
    Ok(AnnotatedImage {
        id: format!("{}+{}", a.id, b.id),
        image,
        boxes,
        labels,
        weights,
    })
}

/// Mixup with a Beta-distributed coefficient. A disabled config returns `a` unchanged.
pub fn mixup_pair(
    a: &AnnotatedImage,
    b: &AnnotatedImage,
    cfg: &MixupConfig,
    seed: u64,
) -> Result<AnnotatedImage> {
    if !cfg.enabled {
        return Ok(a.clone());
    }
    let (_, lambda) = mixup_lambda(cfg, seed)?;
    mixup_with_lambda(a, b, lambda, cfg.weight_by_lambda)
}

/// Nearest-neighbour resample of every channel to `new_h x new_w`.
pub fn resample_nearest(img: &FeatureMap, new_h: usize, new_w: usize) -> Result<FeatureMap> {
    let (c, h, w) = img.shape();
    if new_h == 0 || new_w == 0 {
        return Err(Error::shape("resample to an empty image"));
    }
    let mut out = FeatureMap::zeros(c, new_h, new_w);
    let xs: Vec<usize> = (0..new_w).map(|x| (x * w / new_w).min(w - 1)).collect();
    for ch in 0..c {
        let src = img.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..new_h {
            let sy = (y * h / new_h).min(h - 1);
            let srow = &src[sy * w..(sy + 1) * w];
            for (x, &sx) in xs.iter().enumerate() {
                dst[y * new_w + x] = srow[sx];
            }
        }
    }
    Ok(out)
}

/// Scale an annotated image by `factor` with nearest resampling.
pub fn scale_image(img: &AnnotatedImage, factor: f64) -> Result<AnnotatedImage> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Range(format!("scale factor {factor}")));
    }
    let (h, w) = (img.height(), img.width());
    let nh = ((h as f64 * factor).round() as usize).max(1);
    let nw = ((w as f64 * factor).round() as usize).max(1);
    let image = resample_nearest(&img.image, nh, nw)?;
    let (sx, sy) = (nw as f64 / w as f64, nh as f64 / h as f64);
    Ok(AnnotatedImage {
        id: img.id.clone(),
        image,
        boxes: img.boxes.iter().map(|b| b.scaled(sx, sy)).collect(),
        labels: img.labels.clone(),
        weights: img.weights.clone(),
    })
}

pub fn flip_image(img: &AnnotatedImage) -> AnnotatedImage {
    let w = img.width() as f64;
    AnnotatedImage {
        id: img.id.clone(),
        image: img.image.mirror_x(),
        boxes: img.boxes.iter().map(|b| b.mirrored(w)).collect(),
        labels: img.labels.clone(),
        weights: img.weights.clone(),
    }
}

/// Zero-pad on the bottom and right so both sides are multiples of `multiple`.
pub fn pad_to_multiple(img: &AnnotatedImage, multiple: usize) -> AnnotatedImage {
    let (c, h, w) = img.image.shape();
    let round = |v: usize| v.div_ceil(multiple) * multiple;
    let (nh, nw) = (round(h), round(w));
    if (nh, nw) == (h, w) {
        return img.clone();
    }
    let mut out = FeatureMap::zeros(c, nh, nw);
    for ch in 0..c {
        for y in 0..h {
            let src = &img.image.channel(ch)[y * w..(y + 1) * w];
            out.channel_mut(ch)[y * nw..y * nw + w].copy_from_slice(src);
        }
    }
    AnnotatedImage {
        image: out,
        ..img.clone()
    }
}

/// Random horizontal flip with probability `p_flip`, then a random scale in `[lo, hi]`.
pub fn random_flip_scale(
    img: &AnnotatedImage,
    p_flip: f64,
    scale_range: (f64, f64),
    seed: u64,
) -> Result<AnnotatedImage> {
    let (lo, hi) = scale_range;
    if !(0.0..=1.0).contains(&p_flip) {
        return Err(Error::Range(format!("flip probability {p_flip}")));
    }
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::Range(format!("scale range [{lo}, {hi}]")));
    }
    let mut rng = seed::rng(seed);
    let flip = rng.random::<f64>() < p_flip;
    let u: f64 = rng.random();
    let factor = lo + (hi - lo) * u;
    let out = if flip { flip_image(img) } else { img.clone() };
    if factor == 1.0 {
        return Ok(out);
    }
    scale_image(&out, factor)
}

/// Class frequency profile of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Skew {
    Uniform,
    /// The last class appears exactly once in a fixed fraction of images;
    /// the remaining classes follow geometric weights `head_decay^k`.
    LongTail {
        rare_image_fraction: f64,
        #[serde(default = "default_head_decay")]
        head_decay: f64,
    },
    Weights { weights: Vec<f64> },
}

fn default_head_decay() -> f64 {
    0.6
}

/// Parameters of the synthetic shapes dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Per-class `[min, max]` nominal object size in pixels.
    pub size_ranges: Option<Vec<[f64; 2]>>,
    pub skew: Skew,
    pub objects_per_image: [usize; 2],
    /// Background noise amplitude in `[0, 1]`.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_images: 50,
            image_size: 128,
            num_classes: 4,
            size_ranges: None,
            skew: Skew::Uniform,
            objects_per_image: [1, 3],
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn class_size_range(&self, class: usize) -> [f64; 2] {
        match &self.size_ranges {
            Some(r) => r[class],
            None => [16.0 + 6.0 * class as f64, 26.0 + 8.0 * class as f64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "synthetic image size must be >= 32, got {}",
                self.image_size
            )));
        }
        let [lo, hi] = self.objects_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("objects per image [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {}", self.noise)));
        }
        if let Some(r) = &self.size_ranges {
            if r.len() != self.num_classes {
                return Err(Error::Config(format!(
                    "{} size ranges for {} classes",
                    r.len(),
                    self.num_classes
                )));
            }
        }
        for c in 0..self.num_classes {
            let [a, b] = self.class_size_range(c);
            if !(a >= 4.0 && a <= b && b.is_finite()) {
                return Err(Error::Config(format!("class {} size range [{a}, {b}]", c + 1)));
            }
        }
        match &self.skew {
            Skew::Uniform => {}
            Skew::LongTail {
                rare_image_fraction,
                head_decay,
            } => {
                if !(0.0..=1.0).contains(rare_image_fraction) || !(*head_decay > 0.0) {
                    return Err(Error::Config("long-tail parameters out of range".into()));
                }
            }
            Skew::Weights { weights } => {
                if weights.len() != self.num_classes
                    || weights.iter().any(|w| !(*w >= 0.0))
                    || weights.iter().sum::<f64>() <= 0.0
                {
                    return Err(Error::Config("class weights invalid".into()));
                }
            }
        }
        Ok(())
    }
}

/// Shape family drawn for a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disk,
    Triangle,
    Diamond,
}

impl Shape {
    pub fn for_class(class: usize) -> Shape {
        [Shape::Square, Shape::Disk, Shape::Triangle, Shape::Diamond][class % 4]
    }

    fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        let r = size / 2.0;
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [255, 38, 38],
    [38, 255, 38],
    [38, 38, 255],
    [230, 230, 230],
    [255, 255, 38],
    [255, 38, 255],
    [38, 255, 255],
    [153, 77, 26],
];

/// Fill color of a zero-based class, each component a multiple of 1/255.
pub fn class_color(class: usize) -> [f64; 3] {
    PALETTE[class % PALETTE.len()].map(|v| v as f64 / 255.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementFailure {
    pub image: usize,
    pub requested: usize,
    pub placed: usize,
}

/// Summary of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub num_images: usize,
    pub class_counts: Vec<usize>,
    pub images_per_class: Vec<usize>,
    pub placement_failures: Vec<PlacementFailure>,
}

const STREAM_IMAGES: u64 = 1;
const STREAM_PLAN: u64 = 2;
const PLACEMENT_RETRIES: usize = 64;
const PLACEMENT_GAP: f64 = 2.0;

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Paint a shape; returns the tight box of the painted pixels.
fn paint(img: &mut FeatureMap, shape: Shape, cx: f64, cy: f64, size: f64, color: [f64; 3]) -> Option<BBox> {
    let (_, h, w) = img.shape();
    let r = size / 2.0 + 1.0;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w);
    let y1 = ((cy + r).ceil() as usize).min(h);
    let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
    for y in y0..y1 {
        for x in x0..x1 {
            if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, size) {
                for (ch, &v) in color.iter().enumerate() {
                    img.set(ch, y, x, v);
                }
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x + 1);
                by1 = by1.max(y + 1);
            }
        }
    }
    (bx0 < bx1).then_some(BBox {
        x1: bx0 as f64,
        y1: by0 as f64,
        x2: bx1 as f64,
        y2: by1 as f64,
    })
}

fn pick_class<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    WeightedIndex::new(weights)
        .expect("validated class weights")
        .sample(rng)
}

/// Render a deterministic dataset of filled shapes, one shape family and color per class.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec) -> Result<(Vec<AnnotatedImage>, Manifest)> {
    spec.validate()?;
    let k = spec.num_classes;
    let n = spec.num_images;

    // Which images carry the rare class, for the long-tail preset.
    let mut rare_images = vec![false; n];
    let head_weights: Vec<f64> = match &spec.skew {
        Skew::Uniform => vec![1.0; k],
        Skew::Weights { weights } => weights.clone(),
        Skew::LongTail {
            rare_image_fraction,
            head_decay,
        } => {
            let count = (rare_image_fraction * n as f64).round() as usize;
            let count = if *rare_image_fraction > 0.0 { count.max(1) } else { 0 };
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seed::rng(seed::derive(spec.seed, STREAM_PLAN, 0)));
            for &i in order.iter().take(count.min(n)) {
                rare_images[i] = true;
            }
            (0..k)
                .map(|c| if c + 1 == k { 0.0 } else { head_decay.powi(c as i32) })
                .collect()
        }
    };

    let size = spec.image_size;
    let mut images = Vec::with_capacity(n);
    let mut class_counts = vec![0usize; k];
    let mut images_per_class = vec![0usize; k];
    let mut failures = Vec::new();
    for i in 0..n {
        let mut rng = seed::rng(seed::derive(spec.seed, STREAM_IMAGES, i as u64));
        let mut img = FeatureMap::zeros(3, size, size);
        if spec.noise > 0.0 {
            for v in img.data_mut() {
                *v = quantize(rng.random::<f64>() * spec.noise);
            }
        }
        let [lo, hi] = spec.objects_per_image;
        let requested = rng.random_range(lo..=hi);
        let mut classes: Vec<usize> = (0..requested).map(|_| pick_class(&mut rng, &head_weights)).collect();
        if rare_images[i] {
            classes[0] = k - 1;
        }

        let mut nominal: Vec<BBox> = Vec::new();
        let mut boxes = Vec::new();
        let mut labels = Vec::new();
        for &class in &classes {
            let [smin, smax] = spec.class_size_range(class);
            let mut placed = false;
            for _ in 0..PLACEMENT_RETRIES {
                let s = smin + (smax - smin) * rng.random::<f64>();
                let margin = s / 2.0 + 1.0;
                if 2.0 * margin >= size as f64 {
                    continue;
                }
                let cx = margin + (size as f64 - 2.0 * margin) * rng.random::<f64>();
                let cy = margin + (size as f64 - 2.0 * margin) * rng.random::<f64>();
                let cand = BBox {
                    x1: cx - s / 2.0 - PLACEMENT_GAP,
                    y1: cy - s / 2.0 - PLACEMENT_GAP,
                    x2: cx + s / 2.0 + PLACEMENT_GAP,
                    y2: cy + s / 2.0 + PLACEMENT_GAP,
                };
                let clash = nominal.iter().any(|o| {
                    cand.x1 < o.x2 && o.x1 < cand.x2 && cand.y1 < o.y2 && o.y1 < cand.y2
                });
                if clash {
                    continue;
                }
                if let Some(b) = paint(&mut img, Shape::for_class(class), cx, cy, s, class_color(class)) {
                    nominal.push(cand);
                    boxes.push(b);
                    labels.push(class as u32 + 1);
                    placed = true;
                    break;
                }
            }
            if !placed && boxes.is_empty() {
                return Err(Error::Placement {
                    image: i,
                    reason: format!("class {} does not fit in a {size}px image", class + 1),
                });
            }
        }
        if boxes.len() < requested {
            failures.push(PlacementFailure {
                image: i,
                requested,
                placed: boxes.len(),
            });
        }
        for &l in &labels {
            class_counts[l as usize - 1] += 1;
        }
        for l in labels.iter().collect::<BTreeSet<_>>() {
            images_per_class[*l as usize - 1] += 1;
        }
        images.push(AnnotatedImage::new(format!("img{i:05}"), img, boxes, labels)?);
    }
    Ok((
        images,
        Manifest {
            seed: spec.seed,
            num_images: n,
            class_counts,
            images_per_class,
            placement_failures: failures,
        },
    ))
}

/// Default class names for `k` synthetic classes.
pub fn class_names(k: usize) -> Vec<String> {
    const NAMES: [&str; 4] = ["square", "disk", "triangle", "diamond"];
    (0..k)
        .map(|c| {
            let base = NAMES[c % 4];
            if c < 4 {
                base.to_string()
            } else {
                format!("{base}{}", c / 4 + 1)
            }
        })
        .collect()
}

/// A training sample given directly as a feature pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidSample {
    pub id: String,
    pub pyramid: Vec<FeatureMap>,
    pub image_h: usize,
    pub image_w: usize,
    pub boxes: Vec<BBox>,
    pub labels: Vec<u32>,
}

/// Pyramids in which only one level carries class evidence; all other levels are noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSpec {
    pub num_samples: usize,
    pub image_size: usize,
    pub levels: Vec<i32>,
    pub informative_level: i32,
    pub channels: usize,
    pub num_classes: usize,
    pub object_size: [f64; 2],
    /// Standard deviation of the noise on uninformative levels.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            num_samples: 64,
            image_size: 64,
            levels: vec![3, 4, 5],
            informative_level: 4,
            channels: 8,
            num_classes: 2,
            object_size: [12.0, 24.0],
            noise: 1.0,
            seed: 0,
        }
    }
}

pub fn gen_planted_pyramids(spec: &PlantedSpec) -> Result<Vec<PyramidSample>> {
    if !spec.levels.contains(&spec.informative_level) {
        return Err(Error::Config(format!(
            "informative level {} not among {:?}",
            spec.informative_level, spec.levels
        )));
    }
    if spec.channels == 0 || spec.num_classes == 0 || spec.num_samples == 0 {
        return Err(Error::Config("planted spec has an empty dimension".into()));
    }
    let max_level = *spec.levels.iter().max().expect("nonempty");
    if spec.levels.iter().any(|&l| l < 0) || spec.image_size % (1usize << max_level) != 0 {
        return Err(Error::Config(format!(
            "image size {} not divisible by 2^{max_level}",
            spec.image_size
        )));
    }
    let [smin, smax] = spec.object_size;
    if !(smin > 0.0 && smin <= smax && smax < spec.image_size as f64) {
        return Err(Error::Config(format!("object size [{smin}, {smax}]")));
    }
    let normal = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let size = spec.image_size;
    let mut out = Vec::with_capacity(spec.num_samples);
    for i in 0..spec.num_samples {
        let mut rng = seed::rng(seed::derive(spec.seed, STREAM_IMAGES, i as u64));
        let count = rng.random_range(1..=2usize);
        let mut boxes: Vec<BBox> = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..count {
            for _ in 0..PLACEMENT_RETRIES {
                let s = smin + (smax - smin) * rng.random::<f64>();
                let cx = s / 2.0 + (size as f64 - s) * rng.random::<f64>();
                let cy = s / 2.0 + (size as f64 - s) * rng.random::<f64>();
                let b = BBox {
                    x1: cx - s / 2.0,
                    y1: cy - s / 2.0,
                    x2: cx + s / 2.0,
                    y2: cy + s / 2.0,
                };
                if boxes.iter().any(|o| b.x1 < o.x2 && o.x1 < b.x2 && b.y1 < o.y2 && o.y1 < b.y2) {
                    continue;
                }
                boxes.push(b);
                labels.push(rng.random_range(1..=spec.num_classes as u32));
                break;
            }
        }
        let pyramid = spec
            .levels
            .iter()
            .map(|&l| {
                let stride = 1usize << l;
                let (h, w) = (size / stride, size / stride);
                let mut m = FeatureMap::zeros(spec.channels, h, w).with_level(l);
                if l == spec.informative_level {
                    for (b, &label) in boxes.iter().zip(&labels) {
                        let (cx, cy) = b.center();
                        let sigma = (b.width() / stride as f64 / 2.0).max(0.5);
                        for ch in (0..spec.channels).filter(|ch| ch % spec.num_classes == label as usize - 1) {
                            for y in 0..h {
                                for x in 0..w {
                                    let dx = (x as f64 + 0.5) - cx / stride as f64;
                                    let dy = (y as f64 + 0.5) - cy / stride as f64;
                                    let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                                    let cur = m.get(ch, y, x);
                                    m.set(ch, y, x, cur.max(v));
                                }
                            }
                        }
                    }
                } else {
                    for v in m.data_mut() {
                        *v = normal.sample(&mut rng);
                    }
                }
                m
            })
            .collect();
        out.push(PyramidSample {
            id: format!("planted{i:05}"),
            pyramid,
            image_h: size,
            image_w: size,
            boxes,
            labels,
        });
    }
    Ok(out)
}

/// A labelled image collection with class names.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub images: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn label_lists(&self) -> Vec<Vec<u32>> {
        self.images.iter().map(|i| i.labels.clone()).collect()
    }
}

pub const DATASET_VERSION: u32 = 1;
const SIDECAR_PREFIX: &str = "file:";

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    version: u32,
    classes: Vec<String>,
    images: Vec<ImageRecord>,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    id: String,
    width: usize,
    height: usize,
    #[serde(default = "default_channels")]
    channels: usize,
    /// Base64 of `u8` CHW pixels, or `file:<path>` to a raw sidecar relative to the dataset file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pixels: Option<String>,
    boxes: Vec<[f64; 4]>,
    labels: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
}

fn default_channels() -> usize {
    3
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn encode_pixels(img: &FeatureMap) -> String {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn dataset_to_json(ds: &Dataset) -> Result<String> {
    let file = DatasetFile {
        version: DATASET_VERSION,
        classes: ds.classes.clone(),
        images: ds
            .images
            .iter()
            .map(|img| ImageRecord {
                id: img.id.clone(),
                width: img.width(),
                height: img.height(),
                channels: img.image.channels(),
                pixels: Some(encode_pixels(&img.image)),
                boxes: img.boxes.iter().map(|&b| b.into()).collect(),
                labels: img.labels.clone(),
                weights: img.weights.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&file).map_err(|e| Error::Parse {
        context: "dataset serialization".into(),
        message: e.to_string(),
    })
}

/// Parse a dataset document. Sidecar pixel paths resolve against `base_dir`.
pub fn dataset_from_json(text: &str, base_dir: Option<&Path>) -> Result<Dataset> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: "dataset".into(),
        message: e.to_string(),
    })?;
    if probe.version != DATASET_VERSION {
        return Err(Error::Version {
            expected: DATASET_VERSION,
            found: probe.version,
        });
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: DatasetFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        context: format!("dataset field `{}`", e.path()),
        message: e.inner().to_string(),
    })?;
    let k = file.classes.len();
    let mut images = Vec::with_capacity(file.images.len());
    for (n, rec) in file.images.into_iter().enumerate() {
        let ctx = |msg: String| Error::Parse {
            context: format!("dataset field `images[{n}]` ({})", rec.id),
            message: msg,
        };
        let len = rec.channels * rec.height * rec.width;
        let bytes = match &rec.pixels {
            None => vec![0u8; len],
            Some(p) if p.starts_with(SIDECAR_PREFIX) => {
                let rel = &p[SIDECAR_PREFIX.len()..];
                let path = base_dir.map_or_else(|| Path::new(rel).to_path_buf(), |d| d.join(rel));
                fsio::read(path)?
            }
            Some(p) => base64::engine::general_purpose::STANDARD
                .decode(p)
                .map_err(|e| ctx(format!("pixels: {e}")))?,
        };
        if bytes.len() != len {
            return Err(ctx(format!("pixels: expected {len} bytes, got {}", bytes.len())));
        }
        let image = FeatureMap::from_vec(
            rec.channels,
            rec.height,
            rec.width,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .map_err(|e| ctx(e.to_string()))?;
        if k > 0 {
            if let Some(bad) = rec.labels.iter().find(|&&l| l == 0 || l as usize > k) {
                return Err(Error::Label(format!(
                    "image {}: label {bad} outside [1, {k}]",
                    rec.id
                )));
            }
        }
        let mut img = AnnotatedImage {
            id: rec.id.clone(),
            image,
            boxes: rec.boxes.into_iter().map(BBox::from).collect(),
            labels: rec.labels,
            weights: rec.weights,
        };
        img.validate().map_err(|e| ctx(e.to_string()))?;
        img.id = rec.id;
        images.push(img);
    }
    Ok(Dataset {
        classes: file.classes,
        images,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fsio::write_atomic(path, dataset_to_json(ds)?.as_bytes())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fsio::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    dataset_from_json(&text, path.parent()).map_err(|e| match e {
        Error::Parse { context, message } => Error::Parse {
            context: format!("{}: {context}", path.display()),
            message,
        },
        other => other,
    })
}
