//! Flag definitions. Every flag has a config-file counterpart; flags win.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use uqe_core::ShiftKind;

#[derive(Parser)]
#[command(
    name = "uqe",
    version,
    about = "Unconditional quantile effects of a covariate observed only in an auxiliary sample"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Estimate quantile effects from study and auxiliary data.
    Estimate(EstimateArgs),
    /// Monte Carlo study of the estimator on a simulated design.
    Simulate(SimulateArgs),
    /// Partial-identification bounds for a discrete covariate.
    Bounds(BoundsArgs),
}

pub fn parse_shift(s: &str) -> Result<ShiftKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "mls" => Ok(ShiftKind::Mls),
        "mqs" => Ok(ShiftKind::Mqs),
        "mds" => Ok(ShiftKind::Mds),
        other => Err(format!("unknown shift kind `{other}` (expected mls, mqs or mds)")),
    }
}

#[derive(Args)]
pub struct EstimateArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Study sample CSV with columns y, z1_*, z2_*.
    #[arg(long)]
    pub study: Option<PathBuf>,
    /// Auxiliary sample CSV with columns x, z1_*, z2_*.
    #[arg(long)]
    pub aux: Option<PathBuf>,
    /// Quantile levels in (0,1); comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    pub tau: Vec<f64>,
    /// Shift kinds to evaluate (mls, mqs, mds).
    #[arg(long, value_delimiter = ',', value_parser = parse_shift)]
    pub shift: Vec<ShiftKind>,
    /// Counterfactual covariate distribution: normal(mu,sd), uniform(a,b),
    /// file:donor.csv, table:quantiles.csv, fitted, or fitted+c / fitted-c.
    #[arg(long)]
    pub counterfactual: Option<String>,
    /// Treat the covariate as discrete and report bounds instead of points.
    #[arg(long)]
    pub discrete_x: bool,
    /// Cap on the number of distinct discrete covariate levels.
    #[arg(long)]
    pub max_levels: Option<usize>,
    /// Rows to simulate when the config supplies a data-generating design.
    #[arg(long)]
    pub n: Option<usize>,
    /// Seed for simulated data.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the JSON result document here.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write effect-profile plot data (kind, tau, point, ci_lo, ci_hi) here.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Cap the worker thread count.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replication count.
    #[arg(long)]
    pub reps: Option<usize>,
    /// Sample size per replication.
    #[arg(long)]
    pub n: Option<usize>,
    /// Quantile level in (0,1).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Shift kind (mls, mqs, mds).
    #[arg(long, value_parser = parse_shift)]
    pub shift: Option<ShiftKind>,
    /// Counterfactual covariate distribution (see estimate).
    #[arg(long)]
    pub counterfactual: Option<String>,
    /// Master seed; replication streams derive from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Simulation-oracle draws.
    #[arg(long)]
    pub oracle_draws: Option<usize>,
    /// Simulation-oracle derivative step.
    #[arg(long)]
    pub oracle_step: Option<f64>,
    /// Write the JSON report here.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Write per-replication results as CSV here.
    #[arg(long)]
    pub replications: Option<PathBuf>,
    /// Cap the worker thread count.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args)]
pub struct BoundsArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Study sample CSV with columns y, z1_*, z2_*.
    #[arg(long)]
    pub study: Option<PathBuf>,
    /// Auxiliary sample CSV with columns x, z1_*, z2_* (x discrete).
    #[arg(long)]
    pub aux: Option<PathBuf>,
    /// Quantile levels in (0,1); comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    pub tau: Vec<f64>,
    /// Counterfactual covariate distribution (see estimate).
    #[arg(long)]
    pub counterfactual: Option<String>,
    /// Cap on the number of distinct discrete covariate levels.
    #[arg(long)]
    pub max_levels: Option<usize>,
    /// Rows to simulate when the config supplies a data-generating design.
    #[arg(long)]
    pub n: Option<usize>,
    /// Seed for simulated data.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the JSON result document here.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Cap the worker thread count.
    #[arg(long)]
    pub threads: Option<usize>,
}
