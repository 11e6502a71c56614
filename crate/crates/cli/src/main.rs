//! Batch experiment runner for the `fedmsa` simulator.
//!
//! Subcommands:
//!
//! * `run` — one algorithm on one problem, described by a JSON config;
//!   writes `metrics.csv` and `result.json`.
//! * `verify-neumann` — bias/variance certificates of the stochastic
//!   inverse-Hessian estimator over a parameter grid.
//! * `verify-covariance-order` — covariance ordering of the random-index
//!   vs averaged estimator over the same kind of grid.
//! * `compare` — several algorithms on one problem at matched update
//!   budgets, with an optional sweep over local-step counts.
//! * `gen-data` — synthetic datasets, partitions, and problem instances.
//!
//! Exit codes: `0` on success (for the verify commands: all grid cells
//! pass), `1` on configuration or verification failure, `2` when a run
//! diverges (the offending round is reported).

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Algorithm;

#[derive(Debug, Parser)]
#[command(
    name = "fedmsa",
    version,
    about = "Federated multi-sequence stochastic approximation experiments"
)]
struct Cli {
    /// Worker threads for parallel sections (0 keeps the default pool).
    /// Results never depend on the thread count.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one algorithm on one problem described by a JSON config.
    Run {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's algorithm.
        #[arg(long, value_enum)]
        algorithm: Option<Algorithm>,
    },
    /// Check the inverse-Hessian estimator's bias/variance certificates
    /// over a grid of condition numbers, noise levels, and dimensions.
    VerifyNeumann {
        /// Grid config (JSON); omit for the built-in default grid.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the JSON report.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check that the averaged estimator's covariance never exceeds the
    /// random-index estimator's, over the same kind of grid.
    VerifyCovarianceOrder {
        /// Grid config (JSON); omit for the built-in default grid.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the JSON report.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run several algorithms on one problem at matched update budgets.
    Compare {
        /// Comparison config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a dataset, partition, and instance for a problem family.
    GenData {
        /// Generation config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Errors with process exit semantics.
#[derive(Debug)]
enum CliError {
    /// Bad input: unreadable or malformed config, invalid parameters,
    /// an unsupported algorithm/problem combination (exit 1).
    Config(String),
    /// A verification grid ran but some cell failed its bound (exit 1).
    Verification(String),
    /// A run diverged; `round` is where it was detected (exit 2).
    Divergence { round: usize, what: String },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "{msg}"),
            CliError::Verification(msg) => write!(f, "{msg}"),
            CliError::Divergence { round, what } => {
                write!(f, "diverged at round {round}: {what}")
            }
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Verification(_) => 1,
            CliError::Divergence { .. } => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Run { config, out, algorithm } => commands::run(&config, out, algorithm),
        Command::VerifyNeumann { config, out } => {
            commands::verify_neumann(config.as_deref(), &out)
        }
        Command::VerifyCovarianceOrder { config, out } => {
            commands::verify_covariance_order(config.as_deref(), &out)
        }
        Command::Compare { config, out } => commands::compare(&config, out),
        Command::GenData { config, out } => commands::gen_data(&config, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
