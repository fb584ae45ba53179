//! Configuration resolution: TOML file plus flags, flags winning, with all
//! defaults applied and every value validated before any work starts.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use uqe_core::sim::DgpSpec;
use uqe_core::{EstimatorConfig, ShiftKind};

use crate::args::{BoundsArgs, EstimateArgs, SimulateArgs};
use crate::error::{CliError, Context};
use crate::target;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Estimate,
    Simulate,
    Bounds,
}

/// Fully resolved run description. The serialized form is echoed into the
/// result document; execution-only knobs (paths of the outputs themselves,
/// thread caps) are skipped so documents depend only on what shapes the
/// numbers.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub study: Option<PathBuf>,
    pub aux: Option<PathBuf>,
    /// Simulated data source; mutually exclusive with the file paths.
    pub dgp: Option<DgpSpec>,
    /// Rows drawn from the design (data commands) or per replication
    /// (simulate).
    pub n: usize,
    pub seed: u64,
    pub taus: Vec<f64>,
    pub shifts: Vec<ShiftKind>,
    pub counterfactual: String,
    pub discrete_x: bool,
    pub max_levels: Option<usize>,
    pub estimator: EstimatorConfig,
    pub reps: usize,
    pub oracle_draws: usize,
    pub oracle_step: f64,
    #[serde(skip)]
    pub output: Option<PathBuf>,
    #[serde(skip)]
    pub plot: Option<PathBuf>,
    #[serde(skip)]
    pub replications: Option<PathBuf>,
    #[serde(skip)]
    pub threads: Option<usize>,
}

/// Accepts `key = value` or `key = [values...]` in the file.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

/// Raw file keys. Unknown keys are rejected by name.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    study: Option<PathBuf>,
    aux: Option<PathBuf>,
    tau: Option<OneOrMany<f64>>,
    shift: Option<OneOrMany<ShiftKind>>,
    counterfactual: Option<String>,
    discrete_x: Option<bool>,
    max_levels: Option<usize>,
    n: Option<usize>,
    seed: Option<u64>,
    reps: Option<usize>,
    oracle_draws: Option<usize>,
    oracle_step: Option<f64>,
    output: Option<PathBuf>,
    plot: Option<PathBuf>,
    replications: Option<PathBuf>,
    threads: Option<usize>,
    estimator: Option<EstimatorConfig>,
    dgp: Option<DgpSpec>,
}

fn load_file(path: Option<&PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .context(&format!("config file {}", p.display()))?;
            toml::from_str(&text)
                .map_err(|e| CliError::validation(format!("config file {}: {e}", p.display())))
        }
    }
}

fn check_taus(taus: &[f64]) -> Result<(), CliError> {
    if taus.is_empty() {
        return Err(CliError::validation("tau: at least one quantile level is required"));
    }
    for &t in taus {
        if !(t > 0.0 && t < 1.0) {
            return Err(CliError::validation(format!(
                "tau: quantile levels must lie strictly in (0,1), got {t}"
            )));
        }
    }
    Ok(())
}

fn check_source(
    study: &Option<PathBuf>,
    aux: &Option<PathBuf>,
    dgp: &Option<DgpSpec>,
) -> Result<(), CliError> {
    let files = match (study, aux) {
        (Some(_), Some(_)) => true,
        (None, None) => false,
        _ => {
            return Err(CliError::validation(
                "study and aux files must be given together",
            ))
        }
    };
    match (files, dgp.is_some()) {
        (true, true) => Err(CliError::validation(
            "study/aux files and a [dgp] design are mutually exclusive; provide one data source",
        )),
        (false, false) => Err(CliError::validation(
            "no data source: provide study/aux files or a [dgp] design",
        )),
        _ => Ok(()),
    }
}

pub fn resolve_estimate(a: EstimateArgs) -> Result<RunConfig, CliError> {
    let f = load_file(a.config.as_ref())?;
    let taus = if !a.tau.is_empty() {
        a.tau
    } else {
        f.tau.map(OneOrMany::into_vec).unwrap_or_else(|| vec![0.5])
    };
    check_taus(&taus)?;
    let shifts = if !a.shift.is_empty() {
        a.shift
    } else {
        f.shift
            .map(OneOrMany::into_vec)
            .unwrap_or_else(|| vec![ShiftKind::Mqs])
    };
    if shifts.is_empty() {
        return Err(CliError::validation("shift: at least one shift kind is required"));
    }
    let counterfactual = a
        .counterfactual
        .or(f.counterfactual)
        .unwrap_or_else(|| "fitted+1".to_string());
    target::check_syntax(&counterfactual)?;
    let study = a.study.or(f.study);
    let aux = a.aux.or(f.aux);
    check_source(&study, &aux, &f.dgp)?;
    let discrete_x = a.discrete_x || f.discrete_x.unwrap_or(false);
    let command = if discrete_x {
        CommandKind::Bounds
    } else {
        CommandKind::Estimate
    };
    Ok(RunConfig {
        command,
        study,
        aux,
        dgp: f.dgp,
        n: a.n.or(f.n).unwrap_or(5000),
        seed: a.seed.or(f.seed).unwrap_or(1),
        taus,
        shifts,
        counterfactual,
        discrete_x,
        max_levels: a.max_levels.or(f.max_levels),
        estimator: f.estimator.unwrap_or_default(),
        reps: 0,
        oracle_draws: 0,
        oracle_step: 0.0,
        output: a.output.or(f.output),
        plot: a.plot.or(f.plot),
        replications: None,
        threads: a.threads.or(f.threads),
    })
}

pub fn resolve_bounds(a: BoundsArgs) -> Result<RunConfig, CliError> {
    resolve_estimate(EstimateArgs {
        config: a.config,
        study: a.study,
        aux: a.aux,
        tau: a.tau,
        shift: vec![ShiftKind::Mds],
        counterfactual: a.counterfactual,
        discrete_x: true,
        max_levels: a.max_levels,
        n: a.n,
        seed: a.seed,
        output: a.output,
        plot: None,
        threads: a.threads,
    })
}

pub fn resolve_simulate(a: SimulateArgs) -> Result<RunConfig, CliError> {
    let f = load_file(a.config.as_ref())?;
    if f.study.is_some() || f.aux.is_some() {
        return Err(CliError::validation(
            "simulate draws its data from the [dgp] design; study/aux files are not used",
        ));
    }
    let tau = match a.tau {
        Some(t) => t,
        None => {
            let ts = f.tau.map(OneOrMany::into_vec).unwrap_or_else(|| vec![0.5]);
            if ts.len() != 1 {
                return Err(CliError::validation(
                    "tau: simulate takes a single quantile level",
                ));
            }
            ts[0]
        }
    };
    check_taus(&[tau])?;
    let shift = match a.shift {
        Some(k) => k,
        None => {
            let ks = f
                .shift
                .map(OneOrMany::into_vec)
                .unwrap_or_else(|| vec![ShiftKind::Mqs]);
            if ks.len() != 1 {
                return Err(CliError::validation("shift: simulate takes a single shift kind"));
            }
            ks[0]
        }
    };
    let counterfactual = a
        .counterfactual
        .or(f.counterfactual)
        .unwrap_or_else(|| "uniform(-3.5,4.5)".to_string());
    target::check_syntax(&counterfactual)?;
    target::check_design_free(&counterfactual)?;
    let oracle_step = a.oracle_step.or(f.oracle_step).unwrap_or(0.01);
    if !(oracle_step > 0.0) {
        return Err(CliError::validation(format!(
            "oracle_step must be positive, got {oracle_step}"
        )));
    }
    Ok(RunConfig {
        command: CommandKind::Simulate,
        study: None,
        aux: None,
        dgp: Some(f.dgp.unwrap_or_default()),
        n: a.n.or(f.n).unwrap_or(5000),
        seed: a.seed.or(f.seed).unwrap_or(1),
        taus: vec![tau],
        shifts: vec![shift],
        counterfactual,
        discrete_x: false,
        max_levels: None,
        estimator: f.estimator.unwrap_or_default(),
        reps: a.reps.or(f.reps).unwrap_or(100),
        oracle_draws: a.oracle_draws.or(f.oracle_draws).unwrap_or(1_000_000),
        oracle_step,
        output: a.output.or(f.output),
        plot: None,
        replications: a.replications.or(f.replications),
        threads: a.threads.or(f.threads),
    })
}
