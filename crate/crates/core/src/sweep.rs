//! Size-loss weight sweeps: train one model per `lambda_size`, evaluate, rank by AP.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datakit::Dataset;
use crate::error::{Error, Result};
use crate::infereval::{evaluate, infer_images, GroundTruth, InferOptions};
use crate::traincore::{train, DetectorConfig, TrainConfig, TrainData, TrainRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambda_size: Vec<f64>,
    pub scales: Vec<f64>,
    pub flip: bool,
    pub infer: InferOptions,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambda_size: vec![0.2, 1.0, 5.0],
            scales: vec![1.0],
            flip: false,
            infer: InferOptions::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_size.is_empty() {
            return Err(Error::Config("sweep needs at least one lambda_size".into()));
        }
        if self.lambda_size.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("lambda_size values must be >= 0: {:?}", self.lambda_size)));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("scales must be positive: {:?}", self.scales)));
        }
        self.infer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_size: f64,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar100: f64,
    pub final_loss: f64,
}

/// Rows ordered by AP, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| b.ap.total_cmp(&a.ap).then(a.lambda_size.total_cmp(&b.lambda_size)));
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| rank | lambda_size | AP | AP50 | AP75 | AR100 | final loss |\n");
        s.push_str("|---:|---:|---:|---:|---:|---:|---:|\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
                i + 1,
                r.lambda_size,
                r.ap,
                r.ap50,
                r.ap75,
                r.ar100,
                r.final_loss
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,lambda_size,ap,ap50,ap75,ar100,final_loss\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                i + 1,
                r.lambda_size,
                r.ap,
                r.ap50,
                r.ap75,
                r.ar100,
                r.final_loss
            );
        }
        s
    }
}

/// Train and evaluate once per `lambda_size`; everything else comes from `base`.
///
/// `on_run` sees each finished run before the next one starts.
pub fn lambda_size_sweep(
    train_set: &Dataset,
    test_set: &Dataset,
    model: &DetectorConfig,
    base: &TrainConfig,
    sweep: &SweepConfig,
    mut on_run: impl FnMut(f64, &TrainRun),
) -> Result<SweepReport> {
    sweep.validate()?;
    base.validate()?;
    let gts: Vec<GroundTruth> = test_set.images.iter().map(GroundTruth::from).collect();
    let mut report = SweepReport { rows: Vec::new() };
    for &lambda in &sweep.lambda_size {
        let mut cfg = base.clone();
        cfg.loss.weights.lambda_size = lambda;
        let run = train(TrainData::Images(train_set), model.clone(), cfg)?;
        let preds = infer_images(&run.model, &test_set.images, &sweep.scales, sweep.flip, &sweep.infer)?;
        let r = evaluate(&preds, &gts, model.num_classes)?;
        report.rows.push(SweepRow {
            lambda_size: lambda,
            ap: r.ap,
            ap50: r.ap50,
            ap75: r.ap75,
            ar100: r.ar100,
            final_loss: run.metrics.last().map_or(f64::NAN, |m| m.total),
        });
        on_run(lambda, &run);
    }
    report.sort();
    Ok(report)
}
