use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] onlinepm::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

/// Online portfolio construction with characteristic alphas.
#[derive(Debug, Parser)]
#[command(name = "onlinepm", version)]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config's `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for grid evaluation.
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
    /// Seed for synthetic data (overrides the config's `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate the panel, write its summary and factor returns.
    Ingest,
    /// Write a synthetic panel in the input CSV schema.
    Generate,
    /// Run the configured strategy and the ND, Cap and Rfr benchmarks.
    Backtest,
    /// Grid search, out-of-sample run, PBO and multiple-testing statistics.
    Calibrate,
    /// SR, PSR, DSR and haircut SR for each column of a return matrix.
    Evaluate {
        /// `date,<series>...` CSV of per-period excess returns.
        #[arg(long)]
        returns: PathBuf,
        /// Number of trials behind the selection (default: number of columns).
        #[arg(long)]
        n_trials: Option<usize>,
        /// Variance of the trials' SRs (default: across the columns).
        #[arg(long)]
        var_trial_sr: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        benchmark_sr: f64,
    },
    /// Probability of backtest overfitting for a return matrix.
    Pbo {
        #[arg(long)]
        returns: PathBuf,
        #[arg(long, default_value_t = onlinepm::evaluate::DEFAULT_BLOCKS)]
        blocks: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
