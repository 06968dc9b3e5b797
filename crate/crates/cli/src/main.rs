//! `maemi`: phantom generation, MAE training, anomaly inference, subtraction
//! baseline and evaluation.
//!
//! Exit codes: 0 ok, 2 configuration or input mismatch, 3 I/O or file
//! format, 4 numerical failure, 5 undefined metric.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maemi_core::Error;

use crate::config::{parse_triple, Preset};

#[derive(Parser, Debug)]
#[command(name = "maemi", version, about = "Masked-autoencoder anomaly detection on volumetric two-sequence images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Hyperparameter preset used for anything the config file leaves out.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Seed for phantom generation, training and inference.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Phantom(PhantomArgs),
    /// Train the masked autoencoder on the training split.
    Train(TrainArgs),
    /// Compute anomaly maps by sliding-window masked reconstruction.
    Infer(InferArgs),
    /// Compute DCE subtraction images.
    Subtract(SubtractArgs),
    /// Score maps against ground-truth boxes, or run a hyperparameter sweep.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Volume dims, e.g. 96x84x8.
    #[arg(long, value_parser = parse_triple)]
    pub dims: Option<[usize; 3]>,
    /// Fraction of test cases generated without lesions.
    #[arg(long)]
    pub healthy_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory for checkpoint, optimiser state and loss log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// ViT-patch extents, e.g. 6x6x2.
    #[arg(long, value_parser = parse_triple)]
    pub vit_patch: Option<[usize; 3]>,
    /// Write checkpoint and optimiser state every this many epochs.
    #[arg(long)]
    pub save_every: Option<usize>,
    /// Continue from the checkpoint and optimiser state in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many epochs of the schedule are done.
    #[arg(long)]
    pub until: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Reconstruct every token as its input instead of using a model.
    #[arg(long)]
    pub identity_stub: bool,
    /// Infer every test case of this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Infer a single two-sequence volume.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Tissue mask applied to the map of `--input`.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_triple)]
    pub stride: Option<[usize; 3]>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Count reconstruction error at visible voxels too.
    #[arg(long)]
    pub error_on_visible: bool,
}

#[derive(Args, Debug)]
pub struct SubtractArgs {
    #[command(flatten)]
    pub common: Common,
    /// Stacked DCE volume (pre-contrast first).
    #[arg(long)]
    pub dce: Option<PathBuf>,
    /// Process every test case of this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Min-filter each squared difference before averaging.
    #[arg(long)]
    pub filter_per_term: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory of maps named after the test cases; repeat to compare methods.
    #[arg(long = "maps")]
    pub maps: Vec<PathBuf>,
    /// Single map to score (with `--mask` and `--boxes`).
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Sidecar JSON holding the ground-truth boxes.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    /// Retrain and re-evaluate per value, e.g. mask_ratio=0.5,0.75,0.9.
    #[arg(long)]
    pub sweep: Option<String>,
    /// Report file, or output directory for a sweep.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Json { .. } | Error::Format(_) => 3,
        Error::NonFinite(_) => 4,
        Error::UndefinedMetric(_) => 5,
        Error::Dimension(_)
        | Error::Config(_)
        | Error::Contract(_)
        | Error::DegenerateInput(_)
        | Error::Validation(_)
        | Error::Checkpoint(_)
        | Error::Data(_)
        | Error::Generation(_) => 2,
    }
}

fn threads() -> Result<Option<usize>, String> {
    match std::env::var("MAEMI_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("MAEMI_THREADS must be a positive integer, got '{v}'")),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match threads() {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let run = || commands::run(cli.command);
    let result = match threads {
        Some(n) => maemi_core::par::with_threads(n, run),
        None => run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
