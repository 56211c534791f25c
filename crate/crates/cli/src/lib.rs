//! Command-line driver for the `slick` binary. Everything the binary does is
//! reachable from here so the commands can be exercised in tests.

pub mod bench;
pub mod commands;
pub mod config;
pub mod verify;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{run, CliError, Context};
pub use config::{derive_seed, ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "slick", version, about = "Structured instance segmentation with teacher/student distillation")]
pub struct Cli {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured base seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Data-parallel workers for training and evaluation.
    #[arg(long, global = true, env = "SLICK_THREADS", default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train and eval splits under `<out>/data`.
    GenData,
    /// Train the teacher; writes `<out>/teacher`.
    TrainTeacher(TrainArgs),
    /// Distill a student from a trained teacher; writes `<out>/student`.
    Distill(DistillArgs),
    /// Write `.slkp` predictions under `<out>/predictions`.
    Infer(InferArgs),
    /// Build the part/damage prior table `<out>/calibration.json`.
    Calibrate(CalibrateArgs),
    /// Time teacher and student inference; writes `<out>/bench.json`.
    Bench(BenchArgs),
    /// Run the property suite and print one line per property.
    Verify,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root with `train/` and `eval/` splits (overrides `data.path`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluate mean mask IoU on the eval split afterwards.
    #[arg(long)]
    pub eval: bool,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Teacher checkpoint directory [default: <out>/teacher].
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint directory [default: <out>/student].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Single SLKT image `[H, W, 3]`; otherwise every scene of `--data`.
    #[arg(long, conflicts_with = "data")]
    pub image: Option<PathBuf>,
    /// SLKT heatmap `[H, W, 1]` for `--image`; zero when omitted.
    #[arg(long, requires = "image")]
    pub heatmap: Option<PathBuf>,
    /// Dataset root with an `eval/` split [default: generated from the seed].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Calibration table applied before NMS.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Predict at most this many scenes.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Dataset root with a `train/` split [default: generated from the seed].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Additive smoothing of the counts.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Teacher checkpoint; a fresh model of the configured size otherwise.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Student checkpoint; a fresh model of the configured size otherwise.
    #[arg(long)]
    pub student: Option<PathBuf>,
    /// Square input sides (overrides `bench.sizes`).
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    /// Timed runs per model (overrides `bench.runs`).
    #[arg(long)]
    pub runs: Option<usize>,
}
