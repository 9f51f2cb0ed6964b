//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tsdiff_core::masking::MaskKind;
use tsdiff_core::ModelConfig;

#[derive(Debug, Parser)]
#[command(name = "tsdiff", version, about = "Conditional diffusion for multivariate time series", args_override_self = true)]
pub struct Cli {
    /// TOML file of default flag values (keys are long flag names);
    /// flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Write a synthetic trend / seasonal / noise dataset.
    Synth(SynthArgs),
    /// Self-supervised pretraining with the mixed mask.
    Pretrain(PretrainArgs),
    /// Continue training all weights with a task mask.
    Finetune(FinetuneArgs),
    /// Fill randomly held-out cells.
    Impute(ImputeArgs),
    /// Fill randomly held-out timestamps.
    Interpolate(ImputeArgs),
    /// Predict the last timestamps of each window.
    Forecast(ForecastArgs),
    /// Export conditioning embeddings.
    Embed(EmbedArgs),
    /// Train a reconstruction head and flag anomalous timestamps.
    Anomaly(AnomalyArgs),
    /// Train a classifier on embeddings of imputed windows.
    Classify(ClassifyArgs),
    /// Recompute metrics from a generation run's CSV outputs.
    Evaluate(EvaluateArgs),
    /// Re-run the command recorded in a run manifest.
    Replay(ReplayArgs),
}

impl Command {
    /// Output options of commands that write a run directory.
    pub fn run_opts(&self) -> Option<&RunOpts> {
        match self {
            Command::Synth(a) => Some(&a.run),
            Command::Pretrain(a) => Some(&a.run),
            Command::Finetune(a) => Some(&a.run),
            Command::Impute(a) | Command::Interpolate(a) => Some(&a.run),
            Command::Forecast(a) => Some(&a.run),
            Command::Embed(a) => Some(&a.run),
            Command::Anomaly(a) => Some(&a.run),
            Command::Classify(a) => Some(&a.run),
            Command::Evaluate(_) | Command::Replay(_) => None,
        }
    }

    pub fn default_seed(&self) -> u64 {
        match self {
            Command::Anomaly(_) => 42,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Impute(_) => "impute",
            Command::Interpolate(_) => "interpolate",
            Command::Forecast(_) => "forecast",
            Command::Embed(_) => "embed",
            Command::Anomaly(_) => "anomaly",
            Command::Classify(_) => "classify",
            Command::Evaluate(_) => "evaluate",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunOpts {
    /// Random seed [default: 1, or 42 for anomaly]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run single-threaded with a fixed reduction order.
    #[arg(long)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    /// Window length.
    #[arg(long = "len", visible_alias = "L", default_value_t = 48)]
    pub len: usize,
    /// Total number of windows across all splits.
    #[arg(long, default_value_t = 80)]
    pub instances: usize,
    #[arg(long, default_value_t = 12.0)]
    pub period: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_std: f64,
    /// Draw a random seasonal phase per window.
    #[arg(long)]
    pub random_phase: bool,
    #[command(flatten)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size layers.
    Default,
    /// Narrow layers for desk-scale runs.
    Tiny,
    /// Smallest layers.
    Micro,
}

impl Preset {
    pub fn config(self, n_features: usize) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::new(n_features),
            Preset::Tiny => ModelConfig::tiny(n_features),
            Preset::Micro => ModelConfig::micro(n_features),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMask {
    Imputation,
    History,
    Interpolation,
    Forecasting,
}

impl From<TaskMask> for MaskKind {
    fn from(m: TaskMask) -> Self {
        match m {
            TaskMask::Imputation => MaskKind::Imputation,
            TaskMask::History => MaskKind::History,
            TaskMask::Interpolation => MaskKind::Interpolation,
            TaskMask::Forecasting => MaskKind::Forecasting,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainOpts {
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub weight_decay: f64,
    /// Features sampled per window each epoch (defaults to the manifest's).
    #[arg(long)]
    pub feature_sample: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PretrainArgs {
    /// Dataset manifest (TOML).
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Number of diffusion steps (overrides the preset).
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mask: TaskMask,
    /// Forecast horizon (defaults to the manifest's).
    #[arg(long)]
    pub horizon: Option<usize>,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateOpts {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Samples drawn per window.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Quantile tick for CRPS.
    #[arg(long, default_value_t = 0.05)]
    pub gamma: f64,
    /// Add posterior noise at the last reverse step too.
    #[arg(long)]
    pub terminal_noise: bool,
    /// Skip writing samples.csv (evaluate then reports point metrics only).
    #[arg(long)]
    pub no_samples: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub gen: GenerateOpts,
    /// Fraction of observed cells (or timestamps) held out for evaluation.
    #[arg(long, default_value_t = 0.1)]
    pub ratio: f64,
    #[command(flatten)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub gen: GenerateOpts,
    /// Forecast horizon (defaults to the manifest's).
    #[arg(long)]
    pub horizon: Option<usize>,
    #[command(flatten)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[command(flatten)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnomalyArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Fraction of validation timestamps flagged when setting the threshold.
    #[arg(long, default_value_t = 0.01)]
    pub ratio: f64,
    /// Fixed threshold; skips the validation split.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ClassifyArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Samples drawn per window for the median imputation.
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[command(flatten)]
    pub run: RunOpts,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Output directory of an impute, interpolate or forecast run.
    #[arg(long, value_name = "DIR")]
    pub predictions: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub gamma: f64,
    /// Write metrics.json here as well as printing them.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReplayArgs {
    /// A run.json written by an earlier command.
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}
