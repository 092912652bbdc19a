//! `rafa`: stage-by-stage driver for data generation, training, evaluation
//! and one-shot OOD checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 missing or stale dependency,
//! 3 runtime failure.

mod commands;
mod manifest;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

/// Errors with a fixed exit code; anything else exits with 3.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Dependency(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Dependency(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

#[derive(Parser, Debug)]
#[command(name = "rafa", version, about = "Robust active feature acquisition laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` config; `RAFA_*` environment variables override keys.
    pub config: PathBuf,
    /// Run directory (defaults to the config's `output`, then `runs`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RewardArgs {
    /// Detector reward during training and evaluation.
    #[arg(long, value_enum)]
    pub detector_reward: Option<OnOff>,
    /// Detector reward sign, `+1` or `-1`.
    #[arg(long, allow_hyphen_values = true)]
    pub sign: Option<String>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Comma-separated budgets.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Score,
    Dose,
    Agent,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write train/val/test (and OOD) CSV splits for every seed.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
    /// Train one stage; a forced re-run keeps the previous checkpoint.
    Train {
        #[arg(value_enum)]
        stage: Stage,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        reward: RewardArgs,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a policy at each budget and write metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        reward: RewardArgs,
        /// `rl`, `random` or `greedy`.
        #[arg(long, default_value = "rl")]
        policy: String,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Score partial observations (columns `f*` and `mask*`) with the trained detector.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Seed whose detector to use (defaults to the first configured seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Fixed log-likelihood threshold instead of the calibrated one.
        #[arg(long, allow_hyphen_values = true)]
        tau: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summarize every metrics file in the run directory.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<Failure>() {
                Some(Failure::Usage(_)) => 1,
                Some(Failure::Dependency(_)) => 2,
                None => 3,
            };
            ExitCode::from(code)
        }
    }
}
