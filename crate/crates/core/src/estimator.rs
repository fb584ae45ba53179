//! Orchestration of the estimation pipeline.
//!
//! The tau-independent work (bases, propensity fit, tilting, likelihood
//! ratios, covariate distribution and densities) happens once per data set in
//! [`fit_design`]; each quantile level then adds its own outcome quantile and
//! outcome-model fit via [`DesignFit::theta_at`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::EstimatorConfig;
use crate::counterfactual::CounterfactualDistribution;
use crate::error::{Error, Result};
use crate::nonparam::{
    covariate_bandwidth, quantile_sorted, rule_of_thumb_bandwidth, DensityEstimate, WeightedKde,
};
use crate::outcome::{fit_beta, GmmFit, LambdaModel};
use crate::propensity::{
    balance_gap, compute_tilt_weights, fit_propensity, fit_tilts, likelihood_ratio, PropensityFit,
    TiltFit,
};
use crate::sample::MergedSample;

/// Everything about a data set that does not depend on the quantile level.
#[derive(Debug)]
pub struct DesignFit {
    pub propensity: PropensityFit,
    pub tilt: TiltFit,
    /// Propensity basis rows.
    pub k: DMatrix<f64>,
    /// Tilting basis rows.
    pub t: DMatrix<f64>,
    /// Moment instrument rows.
    pub e: DMatrix<f64>,
    /// Study-side tilt weight per row.
    pub pi_s: Vec<f64>,
    /// Auxiliary-side tilt weight per row.
    pub pi_a: Vec<f64>,
    /// Likelihood ratio per row (meaningful on auxiliary rows).
    pub ell: Vec<f64>,
    /// Likelihood ratios over auxiliary rows, normalized to mean one.
    pub weights_aux: Vec<f64>,
    /// Estimated status-quo covariate distribution (reweighted auxiliary
    /// covariate values).
    pub f_tilde: CounterfactualDistribution,
    /// Reweighted covariate density estimate.
    pub x_kde: WeightedKde,
    pub b_x: f64,
    /// Unweighted study-outcome density estimate.
    pub f_y_kde: WeightedKde,
    pub b_y: f64,
    /// Study outcomes sorted ascending.
    pub sorted_y: Vec<f64>,
    pub q0_hat: f64,
    /// Sup-norm imbalance of the tilting basis after reweighting.
    pub balance_gap: f64,
    pub model: LambdaModel,
}

/// Parameter estimates tied to one quantile level.
#[derive(Debug, Clone)]
pub struct ThetaEstimate {
    pub design: Arc<DesignFit>,
    pub tau: f64,
    /// Study-outcome quantile at `tau`.
    pub q_hat: f64,
    pub beta: DVector<f64>,
    pub gmm: GmmFit,
    /// Study-outcome density at the quantile, with trim status.
    pub f_y_at_q: DensityEstimate,
}

/// Serializable summary of fit quality.
#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostics {
    pub propensity_iterations: usize,
    pub propensity_score_norm: f64,
    pub tilt_residual_norm: f64,
    pub balance_gap: f64,
    /// Mean likelihood ratio over auxiliary rows (1 at a perfect fit).
    pub ell_aux_mean: f64,
    pub study_share: f64,
    pub bandwidth_y: f64,
    pub bandwidth_x: f64,
    pub gmm_objective: f64,
    pub gmm_start_used: usize,
    pub gmm_weakly_identified: bool,
    /// Whether the quantile sits inside the boundary-trimmed region of the
    /// outcome density estimate.
    pub f_y_in_trim: bool,
    pub f_y_at_q: f64,
}

/// Fit all tau-independent stages.
pub fn fit_design(sample: &MergedSample, config: &EstimatorConfig) -> Result<Arc<DesignFit>> {
    config.validate()?;
    let n_study = sample.n_study();
    let link = config.propensity_link;
    let k = config.propensity_basis.eval(sample)?;
    let t = config.tilt_basis.eval(sample)?;
    let e = config.moment_basis.eval(sample)?;

    let propensity = fit_propensity(&k, n_study, link)?;
    let tilt = fit_tilts(&k, &t, n_study, &propensity.gamma, link)?;
    let weights = compute_tilt_weights(&k, &t, &propensity.gamma, &tilt.lambda_s, &tilt.lambda_a, link);
    let ell = likelihood_ratio(&k, &t, n_study, &propensity.gamma, &tilt.lambda_s, &tilt.lambda_a, link);
    let gap = balance_gap(&t, n_study, &weights);

    let xs: &[f64] = &sample.x;
    let ell_aux: Vec<f64> = sample.aux_rows().map(|i| ell[i]).collect();
    let ell_sum: f64 = ell_aux.iter().sum();
    if !(ell_sum > 0.0) || !ell_sum.is_finite() {
        return Err(Error::numerical(
            "likelihood ratio",
            format!("auxiliary likelihood-ratio mass {ell_sum} is unusable"),
        ));
    }
    let n_a = sample.n_aux() as f64;
    let weights_aux: Vec<f64> = ell_aux.iter().map(|w| w * n_a / ell_sum).collect();

    let f_tilde = CounterfactualDistribution::from_sample(xs, Some(&ell_aux))?;
    let b_x = match config.bandwidth_x {
        Some(b) => b,
        None => covariate_bandwidth(xs)?,
    };
    let x_kde = WeightedKde::new(xs, Some(&weights_aux), config.x_kernel, b_x)?;

    let mut sorted_y = sample.y.clone();
    sorted_y.sort_by(f64::total_cmp);
    let b_y = match config.bandwidth_y {
        Some(b) => b,
        None => rule_of_thumb_bandwidth(&sample.y)?,
    };
    let f_y_kde = WeightedKde::new(&sample.y, None, config.y_kernel, b_y)?;

    let terms = if config.outcome.terms.is_empty() {
        LambdaModel::default_terms(&sample.z1_names)
    } else {
        config.outcome.terms.clone()
    };
    let model = LambdaModel::parse(config.outcome.link, &terms, &sample.z1_names)?;

    Ok(Arc::new(DesignFit {
        propensity,
        tilt,
        k,
        t,
        e,
        pi_s: weights.pi_s,
        pi_a: weights.pi_a,
        ell,
        weights_aux,
        f_tilde,
        x_kde,
        b_x,
        f_y_kde,
        b_y,
        sorted_y,
        q0_hat: sample.q0_hat(),
        balance_gap: gap,
        model,
    }))
}

impl DesignFit {
    /// Add the tau-specific stages: outcome quantile, outcome-model fit, and
    /// the outcome density at the quantile.
    pub fn theta_at(
        self: &Arc<Self>,
        sample: &MergedSample,
        config: &EstimatorConfig,
        tau: f64,
    ) -> Result<ThetaEstimate> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::validation(format!(
                "quantile level must lie in (0,1), got {tau}"
            )));
        }
        let q_hat = quantile_sorted(&self.sorted_y, tau);
        let gmm = fit_beta(
            sample,
            &self.e,
            &self.pi_s,
            &self.pi_a,
            q_hat,
            &self.model,
            None,
            &config.gmm.to_options(),
        )?;
        let f_y_at_q = self.f_y_kde.density_trimmed(q_hat);
        if !(f_y_at_q.value > config.density_floor) {
            return Err(Error::numerical(
                "outcome density",
                format!("outcome density vanishes at the tau={tau} quantile {q_hat}"),
            ));
        }
        Ok(ThetaEstimate {
            design: Arc::clone(self),
            tau,
            q_hat,
            beta: gmm.beta.clone(),
            gmm,
            f_y_at_q,
        })
    }
}

/// Full pipeline for a single quantile level.
pub fn fit_theta(
    sample: &MergedSample,
    config: &EstimatorConfig,
    tau: f64,
) -> Result<ThetaEstimate> {
    fit_design(sample, config)?.theta_at(sample, config, tau)
}

impl ThetaEstimate {
    pub fn diagnostics(&self) -> FitDiagnostics {
        let d = &self.design;
        let n_a = d.weights_aux.len().max(1) as f64;
        let ell_aux_mean = d
            .ell
            .iter()
            .skip(d.ell.len() - d.weights_aux.len())
            .sum::<f64>()
            / n_a;
        FitDiagnostics {
            propensity_iterations: d.propensity.iterations,
            propensity_score_norm: d.propensity.score_norm,
            tilt_residual_norm: d.tilt.residual_norm,
            balance_gap: d.balance_gap,
            ell_aux_mean,
            study_share: d.q0_hat,
            bandwidth_y: d.b_y,
            bandwidth_x: d.b_x,
            gmm_objective: self.gmm.objective,
            gmm_start_used: self.gmm.start_used,
            gmm_weakly_identified: self.gmm.weakly_identified,
            f_y_in_trim: self.f_y_at_q.in_trim,
            f_y_at_q: self.f_y_at_q.value,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::OutcomeModelConfig;
    use crate::link::LinkFunction;
    use crate::sample::merge_samples;
    use crate::sim::{generate_dgp, DgpSpec};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sim_config() -> EstimatorConfig {
        EstimatorConfig {
            outcome: OutcomeModelConfig {
                link: LinkFunction::Probit,
                terms: vec!["1".into(), "z1_1".into(), "x".into()],
            },
            ..EstimatorConfig::default()
        }
    }

    #[test]
    fn pipeline_recovers_design_quantities() {
        let spec = DgpSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let (study, aux) = generate_dgp(&spec, 20_000, &mut rng).unwrap();
        let sample = merge_samples(&study, &aux).unwrap();
        let config = sim_config();
        let theta = fit_theta(&sample, &config, 0.5).unwrap();

        // The membership model is correctly specified, so the tilts are
        // near zero and the likelihood ratio averages one.
        let diag = theta.diagnostics();
        assert!(diag.balance_gap < 1e-6, "balance gap {}", diag.balance_gap);
        assert!(theta.design.tilt.lambda_s.amax() < 0.2);
        assert!((diag.ell_aux_mean - 1.0).abs() < 0.05, "ell mean {}", diag.ell_aux_mean);

        // The outcome model is correctly specified probit; compare with the
        // implied coefficients at the fitted quantile.
        let implied = spec.implied_beta(theta.q_hat);
        for j in 0..3 {
            assert_abs_diff_eq!(theta.beta[j], implied[j], epsilon = 0.08);
        }
        assert!(!theta.gmm.weakly_identified);

        // Median of Y in the study population: with defaults, a bit above
        // the unconditional median 0.5 because membership tilts z upward.
        assert!((theta.q_hat - 0.5).abs() < 0.5);
        assert!(theta.f_y_at_q.in_trim);
        // Y is a normal mixture with variance 2.5 plus membership tilt; the
        // density at the median is close to the normal value.
        let sd = 2.5f64.sqrt();
        let normal_peak = crate::link::normal_pdf(0.0) / sd;
        assert!((theta.f_y_at_q.value - normal_peak).abs() / normal_peak < 0.15);
    }

    #[test]
    fn multiple_taus_share_the_design() {
        let spec = DgpSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (study, aux) = generate_dgp(&spec, 4_000, &mut rng).unwrap();
        let sample = merge_samples(&study, &aux).unwrap();
        let config = sim_config();
        let design = fit_design(&sample, &config).unwrap();
        let t25 = design.theta_at(&sample, &config, 0.25).unwrap();
        let t75 = design.theta_at(&sample, &config, 0.75).unwrap();
        assert!(t25.q_hat < t75.q_hat);
        // The outcome-model intercept tracks the quantile level.
        assert!(t25.beta[0] < t75.beta[0]);
        assert!(Arc::ptr_eq(&t25.design, &t75.design));
    }

    #[test]
    fn tau_outside_unit_interval_is_rejected() {
        let spec = DgpSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (study, aux) = generate_dgp(&spec, 500, &mut rng).unwrap();
        let sample = merge_samples(&study, &aux).unwrap();
        let err = fit_theta(&sample, &sim_config(), 1.2).unwrap_err();
        assert!(err.to_string().contains("quantile level"));
    }
}
