//! Reproducible experiment commands over the `hetnoise` library.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod output;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use config::ExperimentConfig;
use error::CliResult;
use output::Source;

#[derive(Debug, Parser)]
#[command(
    name = "hetnoise",
    version,
    about = "Heteroscedastic label-noise experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test datasets from the planted-noise simulator.
    Simulate(SimulateArgs),
    /// Train a model and write a checkpoint plus per-epoch history.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Re-evaluate or retrain across values of one knob.
    Sweep(SweepArgs),
    /// Score the average prediction of several checkpoints.
    Ensemble(EnsembleArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed override: data seed for `simulate`, optimizer seed for `train`
    /// and `sweep`, evaluation seed for `eval` and `ensemble`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
    /// Serialize every random draw through one seeded stream.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Total number of rows before splitting.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory written by `simulate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    pub until_epoch: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file; defaults to the test split of the configured data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report the average noise covariance and its top pairs.
    #[arg(long)]
    pub covariance: bool,
    /// Number of covariance pairs to list.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Homoscedastic checkpoint for the covariance rank histogram.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Monte-Carlo samples at evaluation time.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    McSamples,
    Tau,
    Rank,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated values.
    #[arg(long)]
    pub values: String,
    /// Trained model for the `mc-samples` axis; trained from the config when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory written by `simulate`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EnsembleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Member checkpoints.
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Dataset file; defaults to the test split of the configured data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
}

/// Effective configuration plus the origin of each overridable setting.
pub struct Resolved {
    pub config: ExperimentConfig,
    pub sources: BTreeMap<String, Source>,
    raw: Option<Value>,
    /// When the command started.
    pub started: Instant,
}

impl Resolved {
    pub fn load(common: &CommonArgs) -> CliResult<Self> {
        let started = Instant::now();
        let (config, raw) = match &common.config {
            Some(path) => {
                let cfg = ExperimentConfig::load(path)?;
                let text =
                    std::fs::read_to_string(path).map_err(|e| error::CliError::io(path, e))?;
                (cfg, serde_json::from_str(&text).ok())
            }
            None => (ExperimentConfig::default(), None),
        };
        let mut r = Self {
            config,
            sources: BTreeMap::new(),
            raw,
            started,
        };
        let out = common.out.clone();
        r.set("output.dir", out, |c, v| c.output.dir = v);
        Ok(r)
    }

    /// Applies `flag` when given and records where `key` came from.
    pub fn set<T>(
        &mut self,
        key: &str,
        flag: Option<T>,
        apply: impl FnOnce(&mut ExperimentConfig, T),
    ) {
        let source = if let Some(v) = flag {
            apply(&mut self.config, v);
            Source::Flag
        } else if self.in_file(key) {
            Source::File
        } else {
            Source::Default
        };
        self.sources.insert(key.to_string(), source);
    }

    fn in_file(&self, key: &str) -> bool {
        let pointer = format!("/{}", key.replace('.', "/"));
        self.raw
            .as_ref()
            .is_some_and(|v| v.pointer(&pointer).is_some())
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(a) => commands::simulate::run(&a),
        Command::Train(a) => commands::train::run(&a),
        Command::Eval(a) => commands::eval::run(&a),
        Command::Sweep(a) => commands::sweep::run(&a),
        Command::Ensemble(a) => commands::ensemble::run(&a),
    }
}
