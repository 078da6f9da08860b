//! Desk-scale detector, optimizer, training loop and checkpoints.

pub mod checkpoint;
pub mod extractor;
pub mod model;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint};
pub use extractor::extract_pyramid;
pub use model::{
    detector_backward, detector_forward, BackwardResult, DetectorConfig, DetectorOutput, LossOptions, ToyDetector,
    OUTPUT_STRIDE,
};
pub use optim::{adam_step, cosine_lr, AdamConfig, OptimState};
pub use trainer::{
    smoothed_total, train, write_metrics_jsonl, AugmentConfig, MetricRecord, TrainConfig, TrainData, TrainRun,
    Trainer, WeightSnapshot,
};
