//! Training loop.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::afsm::SelectionWeights;
use crate::boxloss::{build_targets, DetectionTargets, LossBundle, MAX_OBJECTS};
use crate::datakit::{
    casm_ratios_with_floor, draw_samples, flip_image, mixup_pair, resample_nearest, AnnotatedImage, Dataset,
    MixupConfig, PyramidSample, SamplingTable,
};
use crate::error::{Error, Result};
use crate::seed;

use super::model::{BackwardResult, DetectorConfig, LossOptions, ToyDetector, OUTPUT_STRIDE};
use super::optim::{adam_step, cosine_lr, AdamConfig, OptimState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Images are rescaled by a factor drawn uniformly from this range.
    pub scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_range: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub adam: AdamConfig,
    pub loss: LossOptions,
    pub mixup: MixupConfig,
    pub casm: bool,
    pub casm_floor: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Record selection weights every this many iterations (and at the last one).
    pub snapshot_every: usize,
    pub max_objects: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch_size: 8,
            base_lr: 2e-4,
            adam: AdamConfig::default(),
            loss: LossOptions::default(),
            mixup: MixupConfig::default(),
            casm: true,
            casm_floor: 0.0,
            augment: AugmentConfig::default(),
            seed: 0,
            snapshot_every: 50,
            max_objects: MAX_OBJECTS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.snapshot_every == 0 || self.max_objects == 0 {
            return Err(Error::Config("snapshot_every and max_objects must be positive".into()));
        }
        self.loss.weights.validate()?;
        self.mixup.validate()?;
        let [lo, hi] = self.augment.scale_range;
        if !(0.0..=1.0).contains(&self.augment.flip_prob) || !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("augmentation settings {:?}", self.augment)));
        }
        if !(self.casm_floor >= 0.0 && self.casm_floor.is_finite()) {
            return Err(Error::Config(format!("casm_floor {}", self.casm_floor)));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub l_ct: f64,
    pub l_size: f64,
    pub l_off: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSnapshot {
    pub iter: usize,
    /// Batch mean of the weights used in that iteration's forward passes.
    pub weights: SelectionWeights,
}

/// Training inputs: rendered images, or feature pyramids given directly.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Images(&'a Dataset),
    Pyramids { samples: &'a [PyramidSample], num_classes: usize },
}

impl TrainData<'_> {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Images(d) => d.images.len(),
            TrainData::Pyramids { samples, .. } => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TrainData::Images(d) => d.num_classes(),
            TrainData::Pyramids { num_classes, .. } => *num_classes,
        }
    }

    fn labels(&self) -> Vec<Vec<u32>> {
        match self {
            TrainData::Images(d) => d.label_lists(),
            TrainData::Pyramids { samples, .. } => samples.iter().map(|s| s.labels.clone()).collect(),
        }
    }
}

const STREAM_ITER: u64 = 100;
const SUB_SAMPLER: u64 = 0;
const SUB_MIXUP: u64 = 1;
const SUB_AUGMENT: u64 = 2;

/// Stateful trainer; the next iteration index is the optimizer step count.
pub struct Trainer<'a> {
    data: TrainData<'a>,
    cfg: TrainConfig,
    model: ToyDetector,
    optim: OptimState,
    table: SamplingTable,
    metrics: Vec<MetricRecord>,
    snapshots: Vec<WeightSnapshot>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: TrainData<'a>, model: ToyDetector, cfg: TrainConfig) -> Result<Self> {
        let optim = OptimState::new(model.param_count(), cfg.adam);
        Self::resume(data, model, optim, cfg)
    }

    pub fn resume(data: TrainData<'a>, model: ToyDetector, optim: OptimState, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::DegenerateDataset("training set is empty".into()));
        }
        if data.num_classes() != model.num_classes() {
            return Err(Error::Config(format!(
                "dataset has {} classes, model {}",
                data.num_classes(),
                model.num_classes()
            )));
        }
        if optim.len() != model.param_count() {
            return Err(Error::Incompatible(format!(
                "optimizer state has {} entries, model {}",
                optim.len(),
                model.param_count()
            )));
        }
        if cfg.mixup.enabled && matches!(data, TrainData::Pyramids { .. }) {
            return Err(Error::Config("mixup needs image data".into()));
        }
        let table = if cfg.casm {
            casm_ratios_with_floor(&data.labels(), data.num_classes(), cfg.casm_floor)?
        } else {
            SamplingTable::uniform(data.len())
        };
        Ok(Self {
            data,
            cfg,
            model,
            optim,
            table,
            metrics: Vec::new(),
            snapshots: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.optim.t as usize
    }

    pub fn model(&self) -> &ToyDetector {
        &self.model
    }

    pub fn optim(&self) -> &OptimState {
        &self.optim
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn sampling_table(&self) -> &SamplingTable {
        &self.table
    }

    pub fn metrics(&self) -> &[MetricRecord] {
        &self.metrics
    }

    pub fn snapshots(&self) -> &[WeightSnapshot] {
        &self.snapshots
    }

    pub fn into_run(self) -> TrainRun {
        TrainRun {
            model: self.model,
            optim: self.optim,
            metrics: self.metrics,
            snapshots: self.snapshots,
        }
    }

    /// Image indices of iteration `iter`; with mixup the second half are the partners.
    pub fn batch_indices(&self, iter: usize) -> Result<Vec<usize>> {
        let n = self.cfg.batch_size * if self.cfg.mixup.enabled { 2 } else { 1 };
        draw_samples(&self.table, n, self.sub_seed(iter, SUB_SAMPLER, 0))
    }

    fn sub_seed(&self, iter: usize, sub: u64, j: usize) -> u64 {
        let base = seed::derive(self.cfg.seed, STREAM_ITER, iter as u64);
        seed::derive(base, sub, j as u64)
    }

    fn prepare_image(&self, iter: usize, j: usize, idx: &[usize], ds: &Dataset) -> Result<AnnotatedImage> {
        let b = self.cfg.batch_size;
        let a = &ds.images[idx[j]];
        let mut img = if self.cfg.mixup.enabled {
            mixup_pair(a, &ds.images[idx[b + j]], &self.cfg.mixup, self.sub_seed(iter, SUB_MIXUP, j))?
        } else {
            a.clone()
        };
        let mut rng = seed::rng(self.sub_seed(iter, SUB_AUGMENT, j));
        use rand::Rng;
        if rng.random::<f64>() < self.cfg.augment.flip_prob {
            img = flip_image(&img);
        }
        let [lo, hi] = self.cfg.augment.scale_range;
        let factor = lo + (hi - lo) * rng.random::<f64>();
        let m = 1usize << self.model.config().pyramid.max_level().max(2);
        let snap = |v: usize| (((v as f64 * factor) / m as f64).round() as usize).max(1) * m;
        let (h, w) = (img.height(), img.width());
        let (nh, nw) = (snap(h), snap(w));
        if (nh, nw) != (h, w) {
            let (sx, sy) = (nw as f64 / w as f64, nh as f64 / h as f64);
            img.image = resample_nearest(&img.image, nh, nw)?;
            img.boxes = img.boxes.iter().map(|b| b.scaled(sx, sy)).collect();
        }
        Ok(img)
    }

    fn sample_backward(&self, iter: usize, j: usize, idx: &[usize]) -> Result<BackwardResult> {
        let k = self.model.num_classes();
        let targets = |h: usize, w: usize, boxes: &[_], labels: &[u32], weights: Option<&[f64]>| -> Result<DetectionTargets> {
            build_targets(
                boxes,
                labels,
                weights,
                k,
                h / OUTPUT_STRIDE,
                w / OUTPUT_STRIDE,
                OUTPUT_STRIDE,
                self.cfg.max_objects,
            )
        };
        match self.data {
            TrainData::Images(ds) => {
                let img = self.prepare_image(iter, j, idx, ds)?;
                let t = targets(img.height(), img.width(), &img.boxes, &img.labels, img.weights.as_deref())?;
                self.model.backward(&img.image, &t, &self.cfg.loss)
            }
            TrainData::Pyramids { samples, .. } => {
                let s = &samples[idx[j]];
                let t = targets(s.image_h, s.image_w, &s.boxes, &s.labels, None)?;
                self.model.backward_pyramid(&s.pyramid, &t, &self.cfg.loss)
            }
        }
    }

    /// One optimizer step. On error the model and optimizer are left unchanged.
    pub fn step(&mut self) -> Result<MetricRecord> {
        let iter = self.iteration();
        let total = self.cfg.iterations.max(iter + 1);
        let lr = cosine_lr(iter, total, self.cfg.base_lr)?;
        let idx = self.batch_indices(iter)?;
        let results: Vec<Result<BackwardResult>> = (0..self.cfg.batch_size)
            .into_par_iter()
            .map(|j| self.sample_backward(iter, j, &idx))
            .collect();
        let divergence = |component: String| Error::Divergence { iteration: iter, component };
        let mut sum = LossBundle::default();
        let mut grad = vec![0.0; self.model.param_count()];
        let mut weights: Option<SelectionWeights> = None;
        for r in results {
            let r = r.map_err(|e| match e {
                Error::NonFinite(c) | Error::InvalidLoss(c) => divergence(c),
                other => other,
            })?;
            sum.l_ct += r.loss.l_ct;
            sum.l_size += r.loss.l_size;
            sum.l_off += r.loss.l_off;
            sum.total += r.loss.total;
            for (g, v) in grad.iter_mut().zip(&r.grad) {
                *g += v;
            }
            match &mut weights {
                None => weights = Some(r.weights),
                Some(acc) => {
                    for (a, b) in acc.alpha.iter_mut().flatten().zip(r.weights.alpha.iter().flatten()) {
                        *a += b;
                    }
                    for (a, b) in acc.beta.iter_mut().flatten().zip(r.weights.beta.iter().flatten()) {
                        *a += b;
                    }
                }
            }
        }
        let n = self.cfg.batch_size as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        let rec = MetricRecord {
            iter,
            l_ct: sum.l_ct / n,
            l_size: sum.l_size / n,
            l_off: sum.l_off / n,
            total: sum.total / n,
            lr,
        };
        if !rec.total.is_finite() {
            return Err(divergence("total loss".into()));
        }
        let mut params = self.model.params();
        adam_step(&mut self.optim, &mut params, &grad, lr).map_err(|e| match e {
            Error::NonFinite(c) => divergence(c),
            other => other,
        })?;
        self.model.set_params(&params)?;
        self.metrics.push(rec);
        if iter % self.cfg.snapshot_every == 0 || iter + 1 == self.cfg.iterations {
            let mut w = weights.expect("batch is nonempty");
            w.alpha.iter_mut().flatten().for_each(|a| *a /= n);
            w.beta.iter_mut().flatten().for_each(|b| *b /= n);
            self.snapshots.push(WeightSnapshot { iter, weights: w });
        }
        Ok(rec)
    }

    /// Step until `cfg.iterations` steps have been taken.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.iterations)
    }

    pub fn run_until(&mut self, iterations: usize) -> Result<()> {
        while self.iteration() < iterations.min(self.cfg.iterations) {
            self.step()?;
        }
        Ok(())
    }
}

/// Final state of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: ToyDetector,
    pub optim: OptimState,
    pub metrics: Vec<MetricRecord>,
    pub snapshots: Vec<WeightSnapshot>,
}

pub fn train(data: TrainData<'_>, model_cfg: DetectorConfig, cfg: TrainConfig) -> Result<TrainRun> {
    let mut t = Trainer::new(data, ToyDetector::new(model_cfg)?, cfg)?;
    t.run()?;
    Ok(t.into_run())
}

pub fn write_metrics_jsonl<W: Write>(metrics: &[MetricRecord], mut out: W) -> std::io::Result<()> {
    for m in metrics {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Moving average of the total loss over a trailing window.
pub fn smoothed_total(metrics: &[MetricRecord], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..metrics.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let s = &metrics[lo..=i];
            s.iter().map(|m| m.total).sum::<f64>() / s.len() as f64
        })
        .collect()
}
