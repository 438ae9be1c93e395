use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fairprice_core::{Objective, PenaltyKind, Task};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "fairprice", version, about = "Fairness-constrained insurance pricing")]
pub struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,

    /// Record wall-clock time in manifests (breaks byte-identical reruns).
    #[arg(long, global = true)]
    pub timings: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic portfolio with its schema.
    Synth(SynthArgs),
    /// Fit one model and report on the held-out split.
    Fit(FitArgs),
    /// Fit every (architecture, lambda, seed) cell into one tidy CSV.
    Sweep(SweepArgs),
    /// Estimate the dependence between two numeric columns.
    Hgr(HgrArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    TwoStage,
    Autoencoder,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::TwoStage => "two-stage",
            Arch::Autoencoder => "autoencoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Binary,
    Frequency,
    Severity,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Binary => Task::Binary,
            TaskArg::Frequency => Task::Frequency,
            TaskArg::Severity => Task::Severity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyArg {
    None,
    Corr,
    Simple,
    Hgr,
}

impl PenaltyArg {
    /// `none` trains with a zero-weight correlation penalty.
    pub fn kind(self) -> PenaltyKind {
        match self {
            PenaltyArg::None | PenaltyArg::Corr => PenaltyKind::Corr,
            PenaltyArg::Simple => PenaltyKind::Simple,
            PenaltyArg::Hgr => PenaltyKind::Hgr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveArg {
    Dp,
    Eo,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Objective {
        match o {
            ObjectiveArg::Dp => Objective::Dp,
            ObjectiveArg::Eo => Objective::Eo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorArg {
    Nn,
    Witsenhausen,
    Rdc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentEstimatorArg {
    Nn,
    Rdc,
    None,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV; the schema and manifest are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "binary")]
    pub task: TaskArg,
}

/// Data and training options shared by `fit` and `sweep`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// Overrides the schema's task.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long, value_enum, default_value = "dp")]
    pub objective: ObjectiveArg,
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Estimator for the latent-component diagnostics.
    #[arg(long, value_enum, default_value = "nn")]
    pub component_estimator: ComponentEstimatorArg,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum)]
    pub arch: Arch,
    #[arg(long, value_enum, default_value = "none")]
    pub penalty: PenaltyArg,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "two-stage,autoencoder")]
    pub arch: Vec<Arch>,
    #[arg(long, value_enum, default_value = "hgr")]
    pub penalty: PenaltyArg,
    /// Kept as typed so the CSV echoes the grid verbatim.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lambdas: Vec<String>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HgrArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Two column names, `u,v`.
    #[arg(long, value_delimiter = ',', num_args = 1, required = true)]
    pub cols: Vec<String>,
    #[arg(long, value_enum, default_value = "nn")]
    pub estimator: EstimatorArg,
    /// Bins per variable for the Witsenhausen estimator.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
