//! Counterfactual distribution specifications.
//!
//! A target is given as a short string: `normal(mu,sd)`, `uniform(a,b)`,
//! `file:donor.csv` (one `x` column of draws), `table:q.csv` (a `u,x`
//! quantile table covering u=0..1), `fitted` (the reweighted status quo), or
//! `fitted+c` / `fitted-c` (the status quo shifted by a constant).

use uqe_core::{CounterfactualDistribution, DesignFit};

use crate::data;
use crate::error::CliError;

const FORMS: &str =
    "normal(mu,sd), uniform(a,b), file:<path>, table:<path>, fitted, fitted+c, fitted-c";

enum Spec<'a> {
    Normal(f64, f64),
    Uniform(f64, f64),
    File(&'a str),
    Table(&'a str),
    Fitted(f64),
}

fn parse(s: &str) -> Result<Spec<'_>, CliError> {
    let s = s.trim();
    if let Some(rest) = s.strip_prefix("file:") {
        if rest.is_empty() {
            return Err(CliError::validation("counterfactual: file: needs a path"));
        }
        return Ok(Spec::File(rest));
    }
    if let Some(rest) = s.strip_prefix("table:") {
        if rest.is_empty() {
            return Err(CliError::validation("counterfactual: table: needs a path"));
        }
        return Ok(Spec::Table(rest));
    }
    if s == "fitted" {
        return Ok(Spec::Fitted(0.0));
    }
    if let Some(rest) = s.strip_prefix("fitted+").or_else(|| s.strip_prefix("fitted-")) {
        let c: f64 = rest.parse().map_err(|_| {
            CliError::validation(format!("counterfactual: bad shift constant `{rest}`"))
        })?;
        let sign = if s.as_bytes()["fitted".len()] == b'-' { -1.0 } else { 1.0 };
        return Ok(Spec::Fitted(sign * c));
    }
    for (name, make) in [
        ("normal", true),
        ("uniform", false),
    ] {
        if let Some(rest) = s.strip_prefix(name) {
            let inner = rest
                .strip_prefix('(')
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(|| {
                    CliError::validation(format!(
                        "counterfactual: expected {name}(a,b), got `{s}`"
                    ))
                })?;
            let parts: Vec<&str> = inner.split(',').collect();
            if parts.len() != 2 {
                return Err(CliError::validation(format!(
                    "counterfactual: {name} takes two comma-separated numbers, got `{s}`"
                )));
            }
            let a: f64 = parts[0].trim().parse().map_err(|_| {
                CliError::validation(format!("counterfactual: bad number `{}`", parts[0]))
            })?;
            let b: f64 = parts[1].trim().parse().map_err(|_| {
                CliError::validation(format!("counterfactual: bad number `{}`", parts[1]))
            })?;
            return Ok(if make { Spec::Normal(a, b) } else { Spec::Uniform(a, b) });
        }
    }
    Err(CliError::validation(format!(
        "counterfactual: unrecognized specification `{s}`; accepted forms: {FORMS}"
    )))
}

/// Structural check performed at configuration time, before any data work.
pub fn check_syntax(s: &str) -> Result<(), CliError> {
    parse(s).map(|_| ())
}

/// The simulation oracle cannot depend on fitted objects.
pub fn check_design_free(s: &str) -> Result<(), CliError> {
    match parse(s)? {
        Spec::Fitted(_) => Err(CliError::validation(
            "counterfactual: `fitted` refers to an estimated status quo and is not available for simulate",
        )),
        _ => Ok(()),
    }
}

/// Build the distribution, reading files and consulting the fitted design as
/// needed.
pub fn realize(
    s: &str,
    design: Option<&DesignFit>,
) -> Result<CounterfactualDistribution, CliError> {
    match parse(s)? {
        Spec::Normal(mu, sd) => CounterfactualDistribution::normal(mu, sd).map_err(Into::into),
        Spec::Uniform(a, b) => CounterfactualDistribution::uniform(a, b).map_err(Into::into),
        Spec::File(path) => {
            let draws = data::read_donor(path.as_ref())?;
            CounterfactualDistribution::from_sample(&draws, None).map_err(Into::into)
        }
        Spec::Table(path) => {
            let (us, xs) = data::read_table(path.as_ref())?;
            CounterfactualDistribution::from_quantile_table(&us, &xs).map_err(Into::into)
        }
        Spec::Fitted(c) => {
            let d = design.ok_or_else(|| {
                CliError::validation(
                    "counterfactual: `fitted` needs a fitted design in this context",
                )
            })?;
            let g = d.f_tilde.clone();
            Ok(if c == 0.0 { g } else { g.shifted(c) })
        }
    }
}
