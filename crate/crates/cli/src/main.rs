//! Command line front end for the quantile-effect estimator.
//!
//! Three subcommands: `estimate` runs the full pipeline on study and
//! auxiliary CSV files (or on data simulated from the builtin design),
//! `simulate` runs a seeded Monte Carlo study, and `bounds` computes
//! partial-identification intervals for a discrete covariate. Results are
//! emitted as a JSON document plus optional sidecar CSVs; reruns with the
//! same configuration and seed reproduce the output files byte for byte.
//!
//! Exit codes: 0 on success, 2 for configuration or input validation
//! failures, 3 for numerical failures inside the estimation pipeline.
//! Errors print a single JSON line on stderr.

mod args;
mod config;
mod data;
mod error;
mod run;
mod target;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::error::CliError;

fn real_main() -> Result<(), CliError> {
    let cli = Cli::parse();
    let cfg = match cli.command {
        Command::Estimate(a) => config::resolve_estimate(a)?,
        Command::Simulate(a) => config::resolve_simulate(a)?,
        Command::Bounds(a) => config::resolve_bounds(a)?,
    };
    if let Some(k) = cfg.threads {
        if k == 0 {
            return Err(CliError::validation("threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::validation(format!("thread pool setup failed: {e}")))?;
    }
    match cfg.command {
        config::CommandKind::Estimate => run::run_estimate(&cfg),
        config::CommandKind::Simulate => run::run_simulate(&cfg),
        config::CommandKind::Bounds => run::run_bounds(&cfg),
    }
}

fn main() {
    match real_main() {
        Ok(()) => {}
        Err(e) => {
            eprintln!("{}", e.payload());
            std::process::exit(e.exit_code());
        }
    }
}
