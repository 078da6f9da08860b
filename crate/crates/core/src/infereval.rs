//! Decoding, test-time augmentation, NMS and COCO-style evaluation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxloss::{decode_box, BBox, BoxParams, LOG_SIZE_CLAMP};
use crate::datakit::{resample_nearest, AnnotatedImage};
use crate::error::{Error, Result};
use crate::numkit::FeatureMap;
use crate::traincore::{DetectorOutput, ToyDetector, OUTPUT_STRIDE};

/// A scored box. `cls` is one-based, like dataset labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub cls: u32,
}

/// The three prediction maps, before decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMaps {
    pub heatmap: FeatureMap,
    pub offset: FeatureMap,
    pub size: FeatureMap,
}

impl From<DetectorOutput> for RawMaps {
    fn from(o: DetectorOutput) -> Self {
        Self {
            heatmap: o.heatmap,
            offset: o.offset,
            size: o.size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferOptions {
    pub top_k: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            top_k: 100,
            score_thresh: 0.01,
            nms_iou: 0.5,
        }
    }
}

impl InferOptions {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config(format!("NMS threshold must lie in (0, 1), got {}", self.nms_iou)));
        }
        if !self.score_thresh.is_finite() {
            return Err(Error::Config("score threshold must be finite".into()));
        }
        Ok(())
    }
}

fn is_peak(heat: &[f64], h: usize, w: usize, y: usize, x: usize) -> bool {
    let v = heat[y * w + x];
    for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
        for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
            if (ny, nx) == (y, x) {
                continue;
            }
            let q = heat[ny * w + nx];
            // Equal neighbours earlier in row-major order win the tie.
            let beaten = if (ny, nx) < (y, x) { q >= v } else { q > v };
            if beaten {
                return false;
            }
        }
    }
    true
}

/// 3x3 local maxima above `score_thresh`, best `top_k` decoded to image coordinates.
pub fn extract_peaks(
    heatmap: &FeatureMap,
    offset: &FeatureMap,
    size: &FeatureMap,
    top_k: usize,
    score_thresh: f64,
    stride: usize,
) -> Result<Vec<Detection>> {
    let (k, h, w) = heatmap.shape();
    if offset.shape() != (2, h, w) || size.shape() != (2, h, w) {
        return Err(Error::shape(format!(
            "heatmap {:?}, offset {:?}, size {:?}",
            heatmap.shape(),
            offset.shape(),
            size.shape()
        )));
    }
    if top_k == 0 {
        return Err(Error::Range("top_k must be at least 1".into()));
    }
    let mut peaks: Vec<(f64, usize, usize, usize)> = Vec::new();
    for c in 0..k {
        let heat = heatmap.channel(c);
        for y in 0..h {
            for x in 0..w {
                let v = heat[y * w + x];
                if v > score_thresh && is_peak(heat, h, w, y, x) {
                    peaks.push((v, c, y, x));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    peaks.truncate(top_k);
    let s = stride as f64;
    peaks
        .into_iter()
        .map(|(score, c, y, x)| {
            let lw = size.get(0, y, x).clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP);
            let lh = size.get(1, y, x).clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP);
            let b = decode_box(&BoxParams {
                ct_x: x as f64,
                ct_y: y as f64,
                w: lw.exp(),
                h: lh.exp(),
                eps_x: offset.get(0, y, x),
                eps_y: offset.get(1, y, x),
            })?;
            Ok(Detection {
                bbox: b.scaled(s, s),
                score,
                cls: c as u32 + 1,
            })
        })
        .collect()
}

/// Bring maps predicted on a mirrored input back to the original orientation.
pub fn unmirror(maps: &RawMaps) -> RawMaps {
    let mut offset = maps.offset.mirror_x();
    for v in offset.channel_mut(0) {
        *v = 1.0 - *v;
    }
    RawMaps {
        heatmap: maps.heatmap.mirror_x(),
        offset,
        size: maps.size.mirror_x(),
    }
}

/// Average `orig` with the un-mirrored `flipped` maps.
pub fn flip_merge(orig: &RawMaps, flipped: &RawMaps) -> Result<RawMaps> {
    for (a, b) in [
        (&orig.heatmap, &flipped.heatmap),
        (&orig.offset, &flipped.offset),
        (&orig.size, &flipped.size),
    ] {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!("flip merge of {:?} and {:?}", a.shape(), b.shape())));
        }
    }
    let u = unmirror(flipped);
    let avg = |a: &FeatureMap, b: &FeatureMap| {
        let mut out = a.clone();
        for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
            *o = 0.5 * (*o + v);
        }
        out
    };
    Ok(RawMaps {
        heatmap: avg(&orig.heatmap, &u.heatmap),
        offset: avg(&orig.offset, &u.offset),
        size: avg(&orig.size, &u.size),
    })
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy class-aware suppression; input order breaks score ties.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Result<Vec<Detection>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::Range(format!("NMS threshold {iou_thresh}")));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept.iter().all(|k| k.cls != d.cls || iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    Ok(kept)
}

/// Side lengths at `scale`, rounded to the model's size granularity.
pub fn scaled_dims(model: &ToyDetector, h: usize, w: usize, scale: f64) -> (usize, usize) {
    let m = 1usize << model.config().pyramid.max_level().max(2);
    let snap = |v: usize| (((v as f64 * scale) / m as f64).round() as usize).max(1) * m;
    (snap(h), snap(w))
}

/// Raw maps for one image at one scale, optionally merged with the mirrored pass.
pub fn predict_maps(model: &ToyDetector, img: &FeatureMap, flip: bool) -> Result<RawMaps> {
    let maps: RawMaps = model.forward(img)?.into();
    if !flip {
        return Ok(maps);
    }
    let flipped: RawMaps = model.forward(&img.mirror_x())?.into();
    flip_merge(&maps, &flipped)
}

/// Test-time augmentation over scales and horizontal flip. NMS runs when more than one scale is pooled.
pub fn multiscale_infer(
    model: &ToyDetector,
    img: &FeatureMap,
    scales: &[f64],
    flip: bool,
    opts: &InferOptions,
) -> Result<Vec<Detection>> {
    opts.validate()?;
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("scales must be positive: {scales:?}")));
    }
    let (h, w) = (img.height(), img.width());
    let mut pooled = Vec::new();
    for &s in scales {
        let (nh, nw) = scaled_dims(model, h, w, s);
        let resized;
        let input = if (nh, nw) == (h, w) {
            img
        } else {
            resized = resample_nearest(img, nh, nw)?;
            &resized
        };
        let maps = predict_maps(model, input, flip)?;
        let dets = extract_peaks(&maps.heatmap, &maps.offset, &maps.size, opts.top_k, opts.score_thresh, OUTPUT_STRIDE)?;
        let (sx, sy) = (w as f64 / nw as f64, h as f64 / nh as f64);
        pooled.extend(dets.into_iter().map(|d| Detection {
            bbox: d.bbox.scaled(sx, sy),
            ..d
        }));
    }
    if scales.len() > 1 {
        nms(&pooled, opts.nms_iou)
    } else {
        Ok(pooled)
    }
}

/// [`multiscale_infer`] over many images.
pub fn infer_images(
    model: &ToyDetector,
    images: &[AnnotatedImage],
    scales: &[f64],
    flip: bool,
    opts: &InferOptions,
) -> Result<Vec<Vec<Detection>>> {
    images
        .par_iter()
        .map(|img| multiscale_infer(model, &img.image, scales, flip, opts))
        .collect()
}

/// Ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    pub labels: Vec<u32>,
}

impl From<&AnnotatedImage> for GroundTruth {
    fn from(img: &AnnotatedImage) -> Self {
        Self {
            boxes: img.boxes.clone(),
            labels: img.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u32,
    pub num_gt: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub ar100: f64,
    pub ar500: f64,
    /// Classes without ground truth are listed with zero metrics and left out of the means.
    pub per_class: Vec<ClassMetrics>,
}

/// Per-image detection cap when computing AP.
pub const AP_MAX_DETS: usize = 500;
pub const AR_CAPS: [usize; 4] = [1, 10, 100, 500];

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

const RECALL_POINTS: usize = 101;

/// Scores and match flags of one image's class-`c` detections, best first, capped.
fn match_image(dets: &[&Detection], gts: &[&BBox], thresh: f64) -> Vec<(f64, bool)> {
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let o = iou(&d.bbox, g);
                if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
            (d.score, best.is_some())
        })
        .collect()
}

/// 101-point interpolated AP from score-ordered match flags.
fn interpolated_ap(flags: &[bool], num_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let target = r as f64 / (RECALL_POINTS - 1) as f64;
        let k = recall.partition_point(|&x| x < target);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    sum / RECALL_POINTS as f64
}

/// COCO-style AP and AR. `preds[i]` and `gts[i]` belong to the same image.
pub fn evaluate(preds: &[Vec<Detection>], gts: &[GroundTruth], num_classes: usize) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(Error::Length {
            expected: gts.len(),
            got: preds.len(),
        });
    }
    let check = |l: u32| {
        if l == 0 || l as usize > num_classes {
            Err(Error::Label(format!("class {l} outside [1, {num_classes}]")))
        } else {
            Ok(())
        }
    };
    for (p, g) in preds.iter().zip(gts) {
        if g.boxes.len() != g.labels.len() {
            return Err(Error::Length {
                expected: g.boxes.len(),
                got: g.labels.len(),
            });
        }
        p.iter().try_for_each(|d| check(d.cls))?;
        g.labels.iter().try_for_each(|&l| check(l))?;
    }
    let thresholds = iou_thresholds();
    let per_class: Vec<(ClassMetrics, Vec<[f64; 4]>)> = (1..=num_classes as u32)
        .into_par_iter()
        .map(|c| {
            let num_gt: usize = gts.iter().map(|g| g.labels.iter().filter(|&&l| l == c).count()).sum();
            let mut aps = Vec::with_capacity(thresholds.len());
            let mut ars = Vec::with_capacity(thresholds.len());
            if num_gt > 0 {
                let per_image: Vec<(Vec<&Detection>, Vec<&BBox>)> = preds
                    .iter()
                    .zip(gts)
                    .map(|(p, g)| {
                        let mut d: Vec<&Detection> = p.iter().filter(|d| d.cls == c).collect();
                        d.sort_by(|a, b| b.score.total_cmp(&a.score));
                        d.truncate(AP_MAX_DETS);
                        let b = g.boxes.iter().zip(&g.labels).filter(|(_, &l)| l == c).map(|(b, _)| b).collect();
                        (d, b)
                    })
                    .collect();
                for &t in &thresholds {
                    let matched: Vec<Vec<(f64, bool)>> =
                        per_image.iter().map(|(d, g)| match_image(d, g, t)).collect();
                    let mut all: Vec<(f64, bool)> = matched.iter().flatten().copied().collect();
                    all.sort_by(|a, b| b.0.total_cmp(&a.0));
                    let flags: Vec<bool> = all.iter().map(|x| x.1).collect();
                    aps.push(interpolated_ap(&flags, num_gt));
                    ars.push(AR_CAPS.map(|cap| {
                        let tp: usize = matched.iter().map(|m| m.iter().take(cap).filter(|x| x.1).count()).sum();
                        tp as f64 / num_gt as f64
                    }));
                }
            }
            let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            let m = ClassMetrics {
                class: c,
                num_gt,
                ap: mean(&aps),
                ap50: aps.first().copied().unwrap_or(0.0),
                ap75: aps.get(5).copied().unwrap_or(0.0),
            };
            (m, ars)
        })
        .collect();

    let with_gt: Vec<&(ClassMetrics, Vec<[f64; 4]>)> = per_class.iter().filter(|(m, _)| m.num_gt > 0).collect();
    let n = with_gt.len();
    let avg = |f: &dyn Fn(&ClassMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            with_gt.iter().map(|(m, _)| f(m)).sum::<f64>() / n as f64
        }
    };
    let ar = |k: usize| {
        if n == 0 {
            return 0.0;
        }
        let s: f64 = with_gt.iter().map(|(_, a)| a.iter().map(|r| r[k]).sum::<f64>() / a.len() as f64).sum();
        s / n as f64
    };
    Ok(EvalResult {
        ap: avg(&|m| m.ap),
        ap50: avg(&|m| m.ap50),
        ap75: avg(&|m| m.ap75),
        ar1: ar(0),
        ar10: ar(1),
        ar100: ar(2),
        ar500: ar(3),
        per_class: per_class.into_iter().map(|(m, _)| m).collect(),
    })
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub cls: u32,
}

pub fn write_predictions_jsonl<W: Write>(ids: &[String], preds: &[Vec<Detection>], mut out: W) -> Result<()> {
    let io = |e: std::io::Error| Error::io("predictions", e);
    for (id, dets) in ids.iter().zip(preds) {
        for d in dets {
            let rec = PredictionRecord {
                image_id: id.clone(),
                x1: d.bbox.x1,
                y1: d.bbox.y1,
                x2: d.bbox.x2,
                y2: d.bbox.y2,
                score: d.score,
                cls: d.cls,
            };
            serde_json::to_writer(&mut out, &rec).map_err(|e| io(e.into()))?;
            out.write_all(b"\n").map_err(io)?;
        }
    }
    Ok(())
}

/// Parse predictions, grouped by image id.
pub fn read_predictions_jsonl<R: BufRead>(input: R) -> Result<BTreeMap<String, Vec<Detection>>> {
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("predictions", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            context: format!("predictions line {}", n + 1),
            message: e.to_string(),
        })?;
        let bbox = BBox::new(rec.x1, rec.y1, rec.x2, rec.y2)?;
        out.entry(rec.image_id).or_default().push(Detection {
            bbox,
            score: rec.score,
            cls: rec.cls,
        });
    }
    Ok(out)
}
