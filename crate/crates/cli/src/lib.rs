//! Command-line front end: configuration, subcommands, manifests and heatmaps.

pub mod commands;
pub mod config;
pub mod heatmap;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::{ConfigError, RunConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cftwin", version, about = "Channel-fingerprint super-resolution with conditional diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration file; unset keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.iterations=100`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for the command's own randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, Subcommand)]
pub enum Command {
    /// Synthesize a dataset and split it 5:1 into train and test files.
    Gen,
    /// Train the denoiser.
    Train,
    /// Reconstruct fine maps from test inputs.
    Sample,
    /// Plan and apply layer pruning.
    Prune,
    /// Fine-tune a pruned student against its teacher.
    Distill,
    /// Score reconstructions, optionally at unseen factors.
    Eval,
    /// Render ground truth, condition and reconstruction side by side.
    Plot,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gen => "gen",
            Self::Train => "train",
            Self::Sample => "sample",
            Self::Prune => "prune",
            Self::Distill => "distill",
            Self::Eval => "eval",
            Self::Plot => "plot",
        }
    }
}

/// Runs one command and returns the path of its manifest.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let name = cli.command.name();
    let mut overrides = cli.overrides.clone();
    if let (Some(seed), Some(section)) = (cli.seed, commands::seed_section(name)) {
        overrides.push(format!("{section}.seed={seed}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let seed = commands::effective_seed(name, &cfg);
    let run = Run::new(name, cfg, seed, cli.out.clone())?;
    match cli.command {
        Command::Gen => commands::gen(run),
        Command::Train => commands::train_cmd(run),
        Command::Sample => commands::sample_cmd(run),
        Command::Prune => commands::prune_cmd(run),
        Command::Distill => commands::distill_cmd(run),
        Command::Eval => commands::eval_cmd(run),
        Command::Plot => commands::plot_cmd(run),
    }
}

/// Exit code for a failure: configuration, malformed or missing input data, or anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<cftwin::Error>() {
            return match e {
                cftwin::Error::Format { .. } | cftwin::Error::Io { .. } => EXIT_DATA,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}
