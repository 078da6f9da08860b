//! `afsm`: train, evaluate and inspect the desk-scale detector.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use afsm_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "afsm", version, about = "Adaptive feature selection detector toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a detector from a JSON run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint or a predictions file against a dataset.
    Eval(EvalArgs),
    /// Train and evaluate once per size-loss weight.
    Sweep(SweepArgs),
    /// Data generation and inspection utilities.
    #[command(subcommand)]
    Tools(Tool),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["checkpoint", "predictions"]))]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines predictions, scored instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated test scales.
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    pub scales: Vec<f64>,
    #[arg(long)]
    pub flip: bool,
    /// NMS overlap threshold.
    #[arg(long, default_value_t = 0.5)]
    pub iou_thresh: f64,
    #[arg(long, default_value_t = 0.01)]
    pub score_thresh: f64,
    #[arg(long, default_value_t = 100)]
    pub top_k: usize,
    /// Where to write the metrics JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the model's detections as JSON lines.
    #[arg(long)]
    pub save_predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Tool {
    /// Render a synthetic shapes dataset.
    GenData {
        /// Synthetic dataset spec; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a checkpoint's resting selection weights as CSV.
    DumpWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the class-aware sampling table of a dataset as CSV.
    CasmTable {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        floor: f64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::Divergence { .. } => 3,
        Error::Incompatible(_) | Error::Version { .. } => 4,
        _ => 1,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("AFSM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("AFSM_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Tools(t) => commands::tools(&t),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
