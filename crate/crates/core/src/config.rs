//! Estimator configuration: links, model terms, bases, kernels, bandwidth
//! overrides, and solver options. Everything deserializes from a config file
//! with unknown keys rejected, and every field has a sensible default so
//! partial files work.

use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::link::LinkFunction;
use crate::nonparam::KernelKind;
use crate::outcome::GmmOptions;

/// Outcome model: link and index terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutcomeModelConfig {
    pub link: LinkFunction,
    /// Index term labels ("1", "x", "x^2", "x*<z1 col>", z1 column names).
    /// Empty means intercept, every z1 column, `x`, and `x^2`.
    pub terms: Vec<String>,
}

impl Default for OutcomeModelConfig {
    fn default() -> Self {
        OutcomeModelConfig {
            link: LinkFunction::Logit,
            terms: Vec::new(),
        }
    }
}

/// GMM solver knobs (see [`GmmOptions`] for semantics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub two_step: bool,
    pub starts: usize,
    pub max_iter: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        let o = GmmOptions::default();
        GmmConfig {
            two_step: o.two_step,
            starts: o.starts,
            max_iter: o.max_iter,
        }
    }
}

impl GmmConfig {
    pub fn to_options(&self) -> GmmOptions {
        GmmOptions {
            two_step: self.two_step,
            starts: self.starts,
            max_iter: self.max_iter,
            ..GmmOptions::default()
        }
    }
}

/// Full estimator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Link for the sample-membership propensity.
    pub propensity_link: LinkFunction,
    pub outcome: OutcomeModelConfig,
    /// Basis of the propensity index.
    pub propensity_basis: BasisSpec,
    /// Basis balanced exactly by the tilting step.
    pub tilt_basis: BasisSpec,
    /// Instrument basis of the outcome-model moments.
    pub moment_basis: BasisSpec,
    /// Kernel for the outcome density.
    pub y_kernel: KernelKind,
    /// Kernel for the covariate density.
    pub x_kernel: KernelKind,
    /// Outcome bandwidth override; the rule of thumb applies when absent.
    pub bandwidth_y: Option<f64>,
    /// Covariate bandwidth override; the rule of thumb applies when absent.
    pub bandwidth_x: Option<f64>,
    /// Points where the covariate density falls below this are dropped from
    /// distribution-shift averages.
    pub density_floor: f64,
    pub gmm: GmmConfig,
    /// Two-sided confidence level for reported intervals.
    pub ci_level: f64,
    /// Recenter confidence intervals by the estimated smoothing bias. The
    /// point estimate itself is always reported uncorrected.
    pub recenter_bias: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            propensity_link: LinkFunction::Logit,
            outcome: OutcomeModelConfig::default(),
            propensity_basis: BasisSpec::default(),
            tilt_basis: BasisSpec::default(),
            moment_basis: BasisSpec::default(),
            y_kernel: KernelKind::default(),
            x_kernel: KernelKind::default(),
            bandwidth_y: None,
            bandwidth_x: None,
            density_floor: 1e-4,
            gmm: GmmConfig::default(),
            ci_level: 0.95,
            recenter_bias: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::validation(format!(
                "ci_level must lie in (0,1), got {}",
                self.ci_level
            )));
        }
        if !(self.density_floor >= 0.0) {
            return Err(Error::validation(format!(
                "density_floor must be nonnegative, got {}",
                self.density_floor
            )));
        }
        for (name, bw) in [("bandwidth_y", self.bandwidth_y), ("bandwidth_x", self.bandwidth_x)] {
            if let Some(b) = bw {
                if !(b > 0.0) || !b.is_finite() {
                    return Err(Error::validation(format!("{name} must be positive, got {b}")));
                }
            }
        }
        if self.gmm.starts == 0 || self.gmm.max_iter == 0 {
            return Err(Error::validation(
                "gmm starts and max_iter must be at least 1",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        EstimatorConfig::default().validate().unwrap();
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: EstimatorConfig = toml::from_str(
            r#"
            propensity_link = "probit"
            [outcome]
            link = "probit"
            terms = ["1", "z1_1", "x"]
            [moment_basis]
            degree = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.propensity_link, LinkFunction::Probit);
        assert_eq!(cfg.outcome.terms, vec!["1", "z1_1", "x"]);
        assert_eq!(cfg.moment_basis.degree, 2);
        assert_eq!(cfg.tilt_basis, BasisSpec::default());
        assert_eq!(cfg.ci_level, 0.95);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<EstimatorConfig>("bandwith_y = 0.3\n").unwrap_err();
        assert!(err.to_string().contains("bandwith_y"));
    }

    #[test]
    fn bad_values_fail_validation() {
        let mut cfg = EstimatorConfig::default();
        cfg.ci_level = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = EstimatorConfig::default();
        cfg.bandwidth_y = Some(0.0);
        assert!(cfg.validate().is_err());
    }
}
