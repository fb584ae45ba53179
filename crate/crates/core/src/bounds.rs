//! Partial-identification bounds for the distribution-shift effect when the
//! covariate of interest is discrete.
//!
//! With finitely many covariate levels the effect is no longer point
//! identified: the data pin down how much mass the shift moves between
//! adjacent levels, but not which conditioning values that mass carries. The
//! bounds take the worst case over the observed conditioning rows, level by
//! level, and collapse to a point when the outcome model's jump between
//! adjacent levels does not depend on the conditioning variables.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::counterfactual::CounterfactualDistribution;
use crate::error::{Error, Result};
use crate::estimator::ThetaEstimate;
use crate::outcome::LambdaModel;
use crate::sample::MergedSample;

pub const DEFAULT_MAX_LEVELS: usize = 50;

/// Interval width below which the bounds count as point identification.
const COLLAPSE_TOL: f64 = 1e-10;

/// Discrete covariate support with cumulative masses under the status quo
/// (likelihood-ratio weighted auxiliary frequencies).
#[derive(Debug, Clone, Serialize)]
pub struct DiscreteSupport {
    /// Distinct covariate levels, ascending.
    pub points: Vec<f64>,
    /// Status-quo CDF at each level (inclusive), terminal value one.
    pub f_hat: Vec<f64>,
}

impl DiscreteSupport {
    /// Collect the distinct auxiliary covariate values and their weighted
    /// cumulative frequencies. `ell` is the full-length likelihood-ratio
    /// vector from the fitted design.
    pub fn from_fitted(
        sample: &MergedSample,
        ell: &[f64],
        max_levels: usize,
    ) -> Result<DiscreteSupport> {
        let n_s = sample.n_study();
        let mut pairs: Vec<(f64, f64)> = sample
            .aux_rows()
            .map(|i| (sample.x[i - n_s], ell[i]))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        if !(total > 0.0) {
            return Err(Error::numerical(
                "discrete support",
                "likelihood-ratio mass over auxiliary rows is not positive",
            ));
        }
        let mut points = Vec::new();
        let mut masses: Vec<f64> = Vec::new();
        for (x, w) in pairs {
            if points.last() == Some(&x) {
                *masses.last_mut().unwrap() += w;
            } else {
                points.push(x);
                masses.push(w);
            }
        }
        if points.len() > max_levels {
            return Err(Error::validation(format!(
                "covariate takes {} distinct values, more than the {} allowed for discrete bounds",
                points.len(),
                max_levels
            )));
        }
        let mut f_hat = Vec::with_capacity(masses.len());
        let mut acc = 0.0;
        for w in &masses {
            acc += w / total;
            f_hat.push(acc.min(1.0));
        }
        *f_hat.last_mut().unwrap() = 1.0;
        Ok(DiscreteSupport { points, f_hat })
    }
}

/// Worst-case contribution of one adjacent-level pair.
#[derive(Debug, Clone, Serialize)]
pub struct PeriodContribution {
    /// Index of the upper level `x^j` within the support (1-based is the
    /// natural reading; this is the 0-based position).
    pub level: usize,
    pub x_prev: f64,
    pub x: f64,
    /// Counterfactual minus status-quo mass at and below `x_prev`; negative
    /// means the shift pushes mass upward through this boundary.
    pub mass_gap: f64,
    pub lower_term: f64,
    pub upper_term: f64,
    /// Conditioning row attaining the lower term.
    pub z_low: Vec<f64>,
    /// Conditioning row attaining the upper term.
    pub z_high: Vec<f64>,
}

/// Estimated identification interval for a discrete covariate shift.
#[derive(Debug, Clone, Serialize)]
pub struct BoundsResult {
    pub tau: f64,
    pub q_hat: f64,
    pub f_y_at_q: f64,
    pub counterfactual: String,
    pub levels: Vec<f64>,
    pub f_hat: Vec<f64>,
    pub g_mass: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
    /// Set when the interval is a point up to numerical tolerance.
    pub collapsed: bool,
    pub contributions: Vec<PeriodContribution>,
}

/// Per-level bound generating value at one conditioning row: how much the
/// outcome quantile moves per unit of mass crossing from `x_prev` to `x`,
/// scaled by the mass the counterfactual actually moves.
pub fn period_bound(
    model: &LambdaModel,
    beta: &DVector<f64>,
    x: f64,
    x_prev: f64,
    z1: &[f64],
    g_prev: f64,
    f_prev: f64,
    f_y_at_q: f64,
) -> f64 {
    let jump = model.eval(beta, x_prev, z1).value - model.eval(beta, x, z1).value;
    -jump * (g_prev - f_prev) / f_y_at_q
}

/// Assemble the bounds from precomputed ingredients.
///
/// `lambda` holds the outcome-model probability at every conditioning row
/// (one per row of `z1`) and every support level (columns, ascending). The
/// first level needs no term: below the smallest level both CDFs are zero, so
/// no mass crosses that boundary.
pub fn bounds_from_lambda_table(
    points: &[f64],
    f_hat: &[f64],
    g_mass: &[f64],
    lambda: &DMatrix<f64>,
    z1: &DMatrix<f64>,
    f_y_at_q: f64,
) -> Result<(f64, f64, Vec<PeriodContribution>)> {
    let l = points.len();
    if l == 0 || f_hat.len() != l || g_mass.len() != l {
        return Err(Error::validation(
            "bounds need matching support, status-quo, and counterfactual masses",
        ));
    }
    if points.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::validation("support levels must be strictly increasing"));
    }
    for (name, m) in [("status-quo", f_hat), ("counterfactual", g_mass)] {
        if m.windows(2).any(|w| w[1] < w[0] - 1e-12) || m.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
            return Err(Error::validation(format!("{name} masses are not a CDF")));
        }
        if (m[l - 1] - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "{name} masses end at {} instead of 1; the counterfactual must live on the observed levels",
                m[l - 1]
            )));
        }
    }
    if lambda.ncols() != l || lambda.nrows() == 0 || z1.nrows() != lambda.nrows() {
        return Err(Error::validation(
            "outcome-model table must cover every conditioning row at every level",
        ));
    }
    if !(f_y_at_q > 0.0) {
        return Err(Error::validation(format!(
            "outcome density {f_y_at_q} at the quantile must be positive"
        )));
    }

    let nz = lambda.nrows();
    let mut lower = 0.0;
    let mut upper = 0.0;
    let mut contributions = Vec::new();
    for j in 1..l {
        let gap = g_mass[j - 1] - f_hat[j - 1];
        // Jump of the fitted probability from level j-1 to level j; the term
        // is monotone in it, so the worst cases sit at its extremes over the
        // conditioning rows.
        let mut min_row = 0;
        let mut max_row = 0;
        for i in 1..nz {
            let d = lambda[(i, j - 1)] - lambda[(i, j)];
            if d < lambda[(min_row, j - 1)] - lambda[(min_row, j)] {
                min_row = i;
            }
            if d > lambda[(max_row, j - 1)] - lambda[(max_row, j)] {
                max_row = i;
            }
        }
        let term = |row: usize| -> f64 {
            -(lambda[(row, j - 1)] - lambda[(row, j)]) * gap / f_y_at_q
        };
        // gap <= 0: the term grows with the jump; gap > 0: it shrinks.
        let (lo_row, hi_row) = if gap <= 0.0 {
            (min_row, max_row)
        } else {
            (max_row, min_row)
        };
        let (lo, hi) = (term(lo_row), term(hi_row));
        lower += lo;
        upper += hi;
        contributions.push(PeriodContribution {
            level: j,
            x_prev: points[j - 1],
            x: points[j],
            mass_gap: gap,
            lower_term: lo,
            upper_term: hi,
            z_low: (0..z1.ncols()).map(|c| z1[(lo_row, c)]).collect(),
            z_high: (0..z1.ncols()).map(|c| z1[(hi_row, c)]).collect(),
        });
    }
    Ok((lower, upper, contributions))
}

/// Bounds for shifting a fitted discrete covariate toward `g`.
///
/// The conditioning search set is the observed conditioning rows of the
/// merged sample. The counterfactual must place its mass on the observed
/// levels; anything escaping the support range or leaving mass beyond the
/// top level is rejected.
pub fn estimate_bounds(
    sample: &MergedSample,
    theta: &ThetaEstimate,
    g: &CounterfactualDistribution,
    max_levels: Option<usize>,
) -> Result<BoundsResult> {
    let design = &*theta.design;
    let support = DiscreteSupport::from_fitted(
        sample,
        &design.ell,
        max_levels.unwrap_or(DEFAULT_MAX_LEVELS),
    )?;
    let l = support.points.len();
    g.check_support_within(support.points[0], support.points[l - 1])?;
    let g_mass: Vec<f64> = support.points.iter().map(|&x| g.cdf(x)).collect();

    let n = sample.n();
    let model = &design.model;
    let mut lambda = DMatrix::zeros(n, l);
    let mut z1row = vec![0.0; sample.d1()];
    for i in 0..n {
        for c in 0..sample.d1() {
            z1row[c] = sample.z1[(i, c)];
        }
        for (j, &x) in support.points.iter().enumerate() {
            lambda[(i, j)] = model.eval(&theta.beta, x, &z1row).value;
        }
    }
    let (lower, upper, contributions) = bounds_from_lambda_table(
        &support.points,
        &support.f_hat,
        &g_mass,
        &lambda,
        &sample.z1,
        theta.f_y_at_q.value,
    )?;
    Ok(BoundsResult {
        tau: theta.tau,
        q_hat: theta.q_hat,
        f_y_at_q: theta.f_y_at_q.value,
        counterfactual: g.label().to_string(),
        levels: support.points,
        f_hat: support.f_hat,
        g_mass,
        lower,
        upper,
        collapsed: upper - lower <= COLLAPSE_TOL,
        contributions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EstimatorConfig, OutcomeModelConfig};
    use crate::estimator::fit_theta;
    use crate::link::LinkFunction;
    use crate::sample::merge_samples;
    use crate::sim::{generate_dgp, DgpSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binary_support_reduces_to_one_signed_term() {
        // Mass 0.2 moves off the low level; the fitted probability rises in
        // x at both conditioning rows, so both bound ends are negative.
        let points = [0.0, 1.0];
        let f_hat = [0.6, 1.0];
        let g_mass = [0.4, 1.0];
        let lambda = DMatrix::from_row_slice(2, 2, &[0.3, 0.5, 0.2, 0.7]);
        let z1 = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let (lower, upper, terms) =
            bounds_from_lambda_table(&points, &f_hat, &g_mass, &lambda, &z1, 0.25).unwrap();
        // Jumps are -0.2 and -0.5; gap is -0.2; terms are -0.16 and -0.4.
        assert_abs_diff_eq!(lower, -0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(upper, -0.16, epsilon = 1e-12);
        assert_eq!(terms.len(), 1);
        assert_eq!(terms[0].z_low, vec![1.0]);
        assert_eq!(terms[0].z_high, vec![-1.0]);
        assert!(upper < 0.0);
    }

    #[test]
    fn conditioning_free_jumps_collapse_the_interval() {
        let points = [0.0, 1.0, 2.0, 3.0];
        let f_hat = [0.25, 0.5, 0.75, 1.0];
        let g_mass = [0.1, 0.4, 0.9, 1.0];
        // Three conditioning rows, identical probabilities at every level.
        let base = [0.2, 0.35, 0.6, 0.8];
        let mut rows = Vec::new();
        for _ in 0..3 {
            rows.extend_from_slice(&base);
        }
        let lambda = DMatrix::from_row_slice(3, 4, &rows);
        let z1 = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let f_y = 0.3;
        let (lower, upper, _) =
            bounds_from_lambda_table(&points, &f_hat, &g_mass, &lambda, &z1, f_y).unwrap();
        assert!(upper - lower <= 1e-10);
        let direct: f64 = (1..4)
            .map(|j| -(base[j - 1] - base[j]) * (g_mass[j - 1] - f_hat[j - 1]) / f_y)
            .sum();
        assert_abs_diff_eq!(lower, direct, epsilon = 1e-12);
    }

    #[test]
    fn relabeling_levels_preserves_the_bounds() {
        let f_hat = [0.3, 0.7, 1.0];
        let g_mass = [0.5, 0.6, 1.0];
        let lambda = DMatrix::from_row_slice(2, 3, &[0.2, 0.4, 0.9, 0.1, 0.55, 0.6]);
        let z1 = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let a = bounds_from_lambda_table(&[0.0, 1.0, 2.0], &f_hat, &g_mass, &lambda, &z1, 0.4)
            .unwrap();
        let b = bounds_from_lambda_table(&[-7.0, 0.25, 31.0], &f_hat, &g_mass, &lambda, &z1, 0.4)
            .unwrap();
        assert_abs_diff_eq!(a.0, b.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.1, b.1, epsilon = 1e-15);
    }

    #[test]
    fn zero_counterfactual_shift_gives_a_zero_point() {
        let points = [0.0, 1.0, 2.0];
        let f_hat = [0.3, 0.7, 1.0];
        let lambda = DMatrix::from_row_slice(2, 3, &[0.2, 0.4, 0.9, 0.1, 0.55, 0.6]);
        let z1 = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let (lower, upper, _) =
            bounds_from_lambda_table(&points, &f_hat, &f_hat.clone(), &lambda, &z1, 0.4).unwrap();
        assert_abs_diff_eq!(lower, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(upper, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn period_bound_vanishes_without_mass_or_jump() {
        let model = LambdaModel::parse(
            LinkFunction::Logit,
            &["1".into(), "z1_1".into(), "x".into()],
            &["z1_1".into()],
        )
        .unwrap();
        let beta = nalgebra::dvector![0.1, 0.4, 0.8];
        // Equal masses on both sides: nothing crosses the boundary.
        let h = period_bound(&model, &beta, 1.0, 0.0, &[0.3], 0.45, 0.45, 0.3);
        assert_abs_diff_eq!(h, 0.0, epsilon = 1e-15);
        // Zero coefficient on x: the jump between levels vanishes.
        let beta_flat = nalgebra::dvector![0.1, 0.4, 0.0];
        let h = period_bound(&model, &beta_flat, 1.0, 0.0, &[0.3], 0.6, 0.45, 0.3);
        assert_abs_diff_eq!(h, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn fitted_discrete_design_brackets_every_mass_allocation() {
        // Three-level covariate, conditioning-dependent outcome model. The
        // identified set sweeps over how the moved mass is split across
        // conditioning values; every split must land inside the bounds.
        let spec = DgpSpec {
            x_thresholds: Some(vec![-0.5, 0.8]),
            ..DgpSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(314);
        let (study, aux) = generate_dgp(&spec, 6000, &mut rng).unwrap();
        let sample = merge_samples(&study, &aux).unwrap();
        let config = EstimatorConfig {
            outcome: OutcomeModelConfig {
                link: LinkFunction::Probit,
                terms: vec!["1".into(), "z1_1".into(), "x".into()],
            },
            ..EstimatorConfig::default()
        };
        let theta = fit_theta(&sample, &config, 0.5).unwrap();

        // Counterfactual on the observed levels {0,1,2} with more top mass.
        let donor: Vec<f64> = std::iter::repeat(0.0)
            .take(20)
            .chain(std::iter::repeat(1.0).take(30))
            .chain(std::iter::repeat(2.0).take(50))
            .collect();
        let g = CounterfactualDistribution::from_sample(&donor, None).unwrap();
        let r = estimate_bounds(&sample, &theta, &g, None).unwrap();
        assert!(r.lower <= r.upper);
        assert!(!r.collapsed, "interval [{}, {}]", r.lower, r.upper);
        assert_eq!(r.levels, vec![0.0, 1.0, 2.0]);

        // Independent sweep: mix the per-level jump between its extreme
        // conditioning rows on a grid and re-sum the terms.
        for s1 in 0..=10 {
            for s2 in 0..=10 {
                let mix = |c: &PeriodContribution, a: f64| {
                    c.lower_term * a + c.upper_term * (1.0 - a)
                };
                let total = mix(&r.contributions[0], s1 as f64 / 10.0)
                    + mix(&r.contributions[1], s2 as f64 / 10.0);
                assert!(
                    total >= r.lower - 1e-9 && total <= r.upper + 1e-9,
                    "allocation ({s1},{s2}) gives {total} outside [{}, {}]",
                    r.lower,
                    r.upper
                );
            }
        }
    }

    #[test]
    fn counterfactual_off_the_observed_levels_is_rejected() {
        let spec = DgpSpec {
            x_thresholds: Some(vec![0.0]),
            ..DgpSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (study, aux) = generate_dgp(&spec, 1200, &mut rng).unwrap();
        let sample = merge_samples(&study, &aux).unwrap();
        let config = EstimatorConfig {
            outcome: OutcomeModelConfig {
                link: LinkFunction::Probit,
                terms: vec!["1".into(), "z1_1".into(), "x".into()],
            },
            ..EstimatorConfig::default()
        };
        let theta = fit_theta(&sample, &config, 0.5).unwrap();
        // Support beyond the observed binary levels.
        let g = CounterfactualDistribution::uniform(0.0, 3.0).unwrap();
        let err = estimate_bounds(&sample, &theta, &g, None).unwrap_err();
        assert!(err.to_string().contains("support"));
        // An unbounded counterfactual passes the range check but leaves
        // visible mass beyond the top level, which the mass check catches.
        let g = CounterfactualDistribution::normal(0.5, 0.3).unwrap();
        assert!(estimate_bounds(&sample, &theta, &g, None).is_err());
    }

    proptest! {
        #[test]
        fn interval_is_ordered_and_widens_with_the_search_set(
            raw_f in proptest::collection::vec(0.05f64..1.0, 2..5),
            raw_g in proptest::collection::vec(0.05f64..1.0, 2..5),
            rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 2..5), 2..6),
        ) {
            let row_min = rows.iter().map(|r| r.len()).min().unwrap();
            let l = raw_f.len().min(raw_g.len()).min(row_min);
            let to_cdf = |raw: &[f64]| {
                let total: f64 = raw[..l].iter().sum();
                let mut acc = 0.0;
                let mut out = Vec::new();
                for v in &raw[..l] {
                    acc += v / total;
                    out.push(acc.min(1.0));
                }
                *out.last_mut().unwrap() = 1.0;
                out
            };
            let f_hat = to_cdf(&raw_f);
            let g_mass = to_cdf(&raw_g);
            let points: Vec<f64> = (0..l).map(|j| j as f64).collect();
            let flat: Vec<f64> = rows.iter().flat_map(|r| r[..l].to_vec()).collect();
            let lambda = DMatrix::from_row_slice(rows.len(), l, &flat);
            let z1 = DMatrix::from_fn(rows.len(), 1, |i, _| i as f64);

            let (lo_all, hi_all, _) =
                bounds_from_lambda_table(&points, &f_hat, &g_mass, &lambda, &z1, 0.3).unwrap();
            prop_assert!(lo_all <= hi_all + 1e-12);

            // Restricting the search to the first row can only narrow it.
            let first = DMatrix::from_row_slice(1, l, &flat[..l]);
            let z1_first = DMatrix::from_row_slice(1, 1, &[0.0]);
            let (lo_one, hi_one, _) =
                bounds_from_lambda_table(&points, &f_hat, &g_mass, &first, &z1_first, 0.3).unwrap();
            prop_assert!(lo_all <= lo_one + 1e-12 && hi_one <= hi_all + 1e-12);
        }
    }
}
