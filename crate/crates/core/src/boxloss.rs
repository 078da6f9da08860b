//! Box codec and the training losses.
//!
//! Boxes are parameterized CenterNet-style as a center, a size and a sub-cell
//! offset. Size regression uses the modified GIoU loss, which compares a
//! predicted `(w, h)` pair against the ground-truth pair as if both boxes
//! shared one center.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::FeatureMap;

/// Axis-aligned box given by its top-left and bottom-right corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x1: v[0],
            y1: v[1],
            x2: v[2],
            y2: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite corner in {self:?}")));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::InvalidBox(format!("corners out of order in {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> BBox {
        BBox {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }

    /// Mirror about the vertical axis of an image `image_width` wide.
    pub fn mirrored(&self, image_width: f64) -> BBox {
        BBox {
            x1: image_width - self.x2,
            y1: self.y1,
            x2: image_width - self.x1,
            y2: self.y2,
        }
    }
}

/// Center, size and offset of one box, in output-map pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxParams {
    pub ct_x: f64,
    pub ct_y: f64,
    pub w: f64,
    pub h: f64,
    pub eps_x: f64,
    pub eps_y: f64,
}

pub fn decode_box(p: &BoxParams) -> Result<BBox> {
    if !(p.w > 0.0 && p.h > 0.0) {
        return Err(Error::InvalidBox(format!(
            "size must be positive, got {}x{}",
            p.w, p.h
        )));
    }
    let cx = p.ct_x + p.eps_x;
    let cy = p.ct_y + p.eps_y;
    BBox::new(cx - p.w / 2.0, cy - p.h / 2.0, cx + p.w / 2.0, cy + p.h / 2.0)
}

/// Regression targets for one box on a map with the given stride.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedBox {
    pub cell: (i64, i64),
    pub offset: (f64, f64),
    pub size: (f64, f64),
}

impl EncodedBox {
    pub fn params(&self) -> BoxParams {
        BoxParams {
            ct_x: self.cell.0 as f64,
            ct_y: self.cell.1 as f64,
            w: self.size.0,
            h: self.size.1,
            eps_x: self.offset.0,
            eps_y: self.offset.1,
        }
    }
}

pub fn encode_targets(b: &BBox, stride: usize) -> Result<EncodedBox> {
    b.validate()?;
    if stride == 0 {
        return Err(Error::Range("stride must be at least 1".into()));
    }
    if !(b.width() > 0.0 && b.height() > 0.0) {
        return Err(Error::InvalidBox(format!("zero-area box {b:?}")));
    }
    let s = stride as f64;
    let (cx, cy) = b.center();
    let (cx, cy) = (cx / s, cy / s);
    let (fx, fy) = (cx.floor(), cy.floor());
    Ok(EncodedBox {
        cell: (fx as i64, fy as i64),
        offset: (cx - fx, cy - fy),
        size: (b.width() / s, b.height() / s),
    })
}

/// Predicted log-sizes, ground-truth sizes and the foreground mask for up to N objects.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeBatch {
    pub pred_log: Vec<[f64; 2]>,
    pub gt: Vec<[f64; 2]>,
    pub mask: Vec<bool>,
    /// Optional per-slot loss weights; `None` means 1 for every slot.
    pub weights: Option<Vec<f64>>,
}

/// Default number of object slots per image.
pub const MAX_OBJECTS: usize = 128;

/// Predicted log-sizes are clamped to this range before exponentiation.
pub const LOG_SIZE_CLAMP: f64 = 20.0;

impl SizeBatch {
    pub fn new(pred_log: Vec<[f64; 2]>, gt: Vec<[f64; 2]>, mask: Vec<bool>) -> Result<Self> {
        let b = SizeBatch {
            pred_log,
            gt,
            mask,
            weights: None,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn active(&self) -> usize {
        self.mask.iter().filter(|&&f| f).count()
    }

    fn validate(&self) -> Result<()> {
        let n = self.mask.len();
        for len in [self.pred_log.len(), self.gt.len()] {
            if len != n {
                return Err(Error::Length { expected: n, got: len });
            }
        }
        if let Some(w) = &self.weights {
            if w.len() != n {
                return Err(Error::Length {
                    expected: n,
                    got: w.len(),
                });
            }
        }
        for (i, (g, &f)) in self.gt.iter().zip(&self.mask).enumerate() {
            if f && !(g[0] > 0.0 && g[1] > 0.0 && g[0].is_finite() && g[1].is_finite()) {
                return Err(Error::InvalidTarget(format!(
                    "slot {i} has non-positive ground-truth size {g:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Whether the size loss is summed over active objects or averaged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeNorm {
    #[default]
    Sum,
    Mean,
}

/// Modified GIoU loss of one object on post-exponential sizes, with
/// `d loss / d pred_w` and `d loss / d pred_h`.
///
/// At exact ties `min`/`max` take the first (predicted) argument.
pub fn mgiou_single(pw: f64, ph: f64, gw: f64, gh: f64) -> (f64, f64, f64) {
    let (tw, dtw) = if pw <= gw { (pw, 1.0) } else { (gw, 0.0) };
    let (th, dth) = if ph <= gh { (ph, 1.0) } else { (gh, 0.0) };
    let (cw, dcw) = if pw >= gw { (pw, 1.0) } else { (gw, 0.0) };
    let (ch, dch) = if ph >= gh { (ph, 1.0) } else { (gh, 0.0) };

    let ap = pw * ph;
    let ag = gw * gh;
    let at = tw * th;
    let ac = cw * ch;
    let u = ap + ag - at;
    let giou = at / u - (ac - u) / ac;
    let loss = 1.0 - giou;

    // loss = 2 - at/u - u/ac
    let grad = |d_at: f64, d_ap: f64, d_ac: f64| {
        let d_u = d_ap - d_at;
        -(d_at * u - at * d_u) / (u * u) - (d_u * ac - u * d_ac) / (ac * ac)
    };
    let dw = grad(dtw * th, ph, dcw * ch);
    let dh = grad(dth * tw, pw, dch * cw);
    (loss, dw, dh)
}

/// Modified GIoU size loss and its gradient with respect to `pred_log`.
///
/// Masked slots contribute neither loss nor gradient.
pub fn mgiou_loss(batch: &SizeBatch, norm: SizeNorm) -> Result<(f64, Vec<[f64; 2]>)> {
    batch.validate()?;
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 2]; batch.len()];
    for i in 0..batch.len() {
        if !batch.mask[i] {
            continue;
        }
        let wt = batch.weights.as_ref().map_or(1.0, |w| w[i]);
        let [lw, lh] = batch.pred_log[i];
        let cw = lw.clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP);
        let ch = lh.clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP);
        let (pw, ph) = (cw.exp(), ch.exp());
        let [gw, gh] = batch.gt[i];
        let (l, dw, dh) = mgiou_single(pw, ph, gw, gh);
        loss += wt * l;
        let pass_w = if cw == lw { 1.0 } else { 0.0 };
        let pass_h = if ch == lh { 1.0 } else { 0.0 };
        grad[i] = [wt * dw * pw * pass_w, wt * dh * ph * pass_h];
    }
    if norm == SizeNorm::Mean {
        let n = batch.active().max(1) as f64;
        loss /= n;
        for g in &mut grad {
            g[0] /= n;
            g[1] /= n;
        }
    }
    Ok((loss, grad))
}

/// Exponents of the penalty-reduced focal loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
        }
    }
}

pub const PROB_CLAMP: f64 = 1e-12;

/// Penalty-reduced focal loss on a center heatmap.
///
/// Peak cells (`gt == 1`) contribute `-(1-p)^a log p`; all others
/// `-(1-y)^b p^a log(1-p)`. The sum is divided by `max(1, #peaks)`.
/// Returns the loss and its gradient with respect to `pred`.
pub fn center_focal_loss(
    pred: &FeatureMap,
    gt: &FeatureMap,
    params: FocalParams,
) -> Result<(f64, FeatureMap)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "heatmap shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (c, h, w) = pred.shape();
    let FocalParams { alpha: a, beta: b } = params;
    let mut grad = FeatureMap::zeros(c, h, w);
    let mut total = 0.0;
    let mut peaks = 0usize;
    for ((&p_raw, &y), g) in pred.data().iter().zip(gt.data()).zip(grad.data_mut()) {
        let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let inside = if p == p_raw { 1.0 } else { 0.0 };
        if y == 1.0 {
            peaks += 1;
            let q = 1.0 - p;
            total += -q.powf(a) * p.ln();
            *g = inside * (a * q.powf(a - 1.0) * p.ln() - q.powf(a) / p);
        } else {
            let neg = (1.0 - y).powf(b);
            let q = 1.0 - p;
            total += -neg * p.powf(a) * q.ln();
            *g = inside * -neg * (a * p.powf(a - 1.0) * q.ln() - p.powf(a) / q);
        }
    }
    let n = peaks.max(1) as f64;
    for g in grad.data_mut() {
        *g /= n;
    }
    Ok((total / n, grad))
}

/// Mean absolute offset error over active cells and both coordinates.
pub fn offset_l1_loss(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<(f64, Vec<[f64; 2]>)> {
    offset_l1_loss_weighted(pred, gt, None)
}

/// [`offset_l1_loss`] with optional per-cell weights.
pub fn offset_l1_loss_weighted(
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<[f64; 2]>)> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} predicted offsets for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != pred.len() {
            return Err(Error::Length {
                expected: pred.len(),
                got: w.len(),
            });
        }
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = 2.0 * pred.len() as f64;
    let sign = |d: f64| {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (k, (p, g)) in pred.iter().zip(gt).enumerate() {
        let wt = weights.map_or(1.0, |w| w[k]);
        let (dx, dy) = (p[0] - g[0], p[1] - g[1]);
        loss += wt * (dx.abs() + dy.abs());
        grad.push([wt * sign(dx) / n, wt * sign(dy) / n]);
    }
    Ok((loss / n, grad))
}

/// Weights of the size and offset terms in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_size: f64,
    pub lambda_off: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_size: 1.0,
            lambda_off: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_size >= 0.0 && self.lambda_off >= 0.0)
            || !self.lambda_size.is_finite()
            || !self.lambda_off.is_finite()
        {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_ct: f64,
    pub l_size: f64,
    pub l_off: f64,
    pub total: f64,
}

pub fn total_loss(l_ct: f64, l_size: f64, l_off: f64, w: &LossWeights) -> Result<LossBundle> {
    for (name, v) in [("center", l_ct), ("size", l_size), ("offset", l_off)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
        if v < 0.0 {
            return Err(Error::InvalidLoss(format!("{name} loss is negative: {v}")));
        }
    }
    w.validate()?;
    Ok(LossBundle {
        l_ct,
        l_size,
        l_off,
        total: l_ct + w.lambda_size * l_size + w.lambda_off * l_off,
    })
}

/// Radius of the heatmap splat: the largest center displacement that keeps a
/// box of the given size above `min_overlap` IoU with the ground truth.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let (h, w, mo) = (height, width, min_overlap);

    let b1 = h + w;
    let c1 = w * h * (1.0 - mo) / (1.0 + mo);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - mo) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * mo;
    let b3 = -2.0 * mo * (h + w);
    let c3 = (mo - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;

    r1.min(r2).min(r3)
}

pub const HEATMAP_MIN_OVERLAP: f64 = 0.7;

/// Max-splat a Gaussian with `sigma = radius / 3` around `(cx, cy)` into one
/// channel, restricted to the `radius` window. The center cell is set to 1.
pub fn draw_gaussian(map: &mut FeatureMap, channel: usize, cx: usize, cy: usize, radius: usize) {
    let (_, h, w) = map.shape();
    let sigma = radius as f64 / 3.0;
    let r = radius as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (cx as i64 + dx, cy as i64 + dy);
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            let v = if dx == 0 && dy == 0 {
                1.0
            } else {
                (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp()
            };
            if v < f64::EPSILON {
                continue;
            }
            let (x, y) = (x as usize, y as usize);
            if v > map.get(channel, y, x) {
                map.set(channel, y, x, v);
            }
        }
    }
}

/// Regression targets of one object on the output map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectTarget {
    /// `(x, y)` cell on the output map.
    pub cell: (usize, usize),
    /// Zero-based class channel.
    pub class: usize,
    pub offset: [f64; 2],
    pub size: [f64; 2],
    pub weight: f64,
}

/// Everything needed to evaluate the training objective for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    pub heatmap: FeatureMap,
    pub objects: Vec<ObjectTarget>,
    pub max_objects: usize,
}

/// Build heatmap, offset and size targets for boxes given in image pixels.
///
/// `labels` are one-based class indices in `[1, num_classes]`. At most
/// `max_objects` objects are kept.
pub fn build_targets(
    boxes: &[BBox],
    labels: &[u32],
    weights: Option<&[f64]>,
    num_classes: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    max_objects: usize,
) -> Result<DetectionTargets> {
    if boxes.len() != labels.len() {
        return Err(Error::Length {
            expected: boxes.len(),
            got: labels.len(),
        });
    }
    if num_classes == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("empty target map"));
    }
    let mut heatmap = FeatureMap::zeros(num_classes, out_h, out_w);
    let mut objects = Vec::new();
    for (k, (b, &label)) in boxes.iter().zip(labels).enumerate().take(max_objects) {
        if label == 0 || label as usize > num_classes {
            return Err(Error::Label(format!(
                "label {label} outside [1, {num_classes}]"
            )));
        }
        let enc = encode_targets(b, stride)?;
        let cx = enc.cell.0.clamp(0, out_w as i64 - 1) as usize;
        let cy = enc.cell.1.clamp(0, out_h as i64 - 1) as usize;
        let class = label as usize - 1;
        let radius = gaussian_radius(enc.size.1.ceil(), enc.size.0.ceil(), HEATMAP_MIN_OVERLAP)
            .max(0.0)
            .floor() as usize;
        draw_gaussian(&mut heatmap, class, cx, cy, radius);
        objects.push(ObjectTarget {
            cell: (cx, cy),
            class,
            offset: [
                enc.offset.0 + (enc.cell.0 - cx as i64) as f64,
                enc.offset.1 + (enc.cell.1 - cy as i64) as f64,
            ],
            size: [enc.size.0, enc.size.1],
            weight: weights.map_or(1.0, |w| w[k]),
        });
    }
    Ok(DetectionTargets {
        heatmap,
        objects,
        max_objects,
    })
}
