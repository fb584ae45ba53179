//! Sample-membership propensity model and exponential tilting.
//!
//! Membership in the study sample is modeled as `P(R=1|Z) = L(k(Z)'gamma)`
//! and fitted by maximum likelihood. Two tilting parameter vectors then
//! adjust the fitted propensity so that reweighted study and auxiliary rows
//! balance the tilting basis `t(Z)` exactly in sample; the tilted fit yields
//! the per-row likelihood ratio used to transport auxiliary averages into
//! the study population.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::link::LinkFunction;

/// Fitted probabilities are required to stay inside
/// `(PROB_FLOOR, 1 - PROB_FLOOR)`.
pub const PROB_FLOOR: f64 = 1e-6;

const MAX_ITER: usize = 100;
const SCORE_TOL: f64 = 1e-9;
const TILT_TOL: f64 = 1e-11;

#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub gamma: DVector<f64>,
    pub log_likelihood: f64,
    pub score_norm: f64,
    pub iterations: usize,
}

fn row_dot(m: &DMatrix<f64>, i: usize, v: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..m.ncols() {
        acc += m[(i, j)] * v[j];
    }
    acc
}

/// Maximum-likelihood fit of the membership propensity.
///
/// Rows `0..n_study` are study rows. Newton iterations with step halving;
/// separation (some rows pushed to probability 0 or 1 with a diverging
/// coefficient) is reported as a numerical error.
pub fn fit_propensity(
    k: &DMatrix<f64>,
    n_study: usize,
    link: LinkFunction,
) -> Result<PropensityFit> {
    let n = k.nrows();
    let dk = k.ncols();
    if n_study == 0 || n_study >= n {
        return Err(Error::validation(
            "propensity fit needs both study and auxiliary rows",
        ));
    }

    let mut gamma = DVector::zeros(dk);

    let loglik = |gamma: &DVector<f64>| -> f64 {
        let mut ll = 0.0;
        for i in 0..n {
            let m = row_dot(k, i, gamma);
            ll += if i < n_study {
                link.log_cdf(m)
            } else {
                link.log_sf(m)
            };
        }
        ll
    };

    let mut ll = loglik(&gamma);
    for iter in 1..=MAX_ITER {
        let mut score = DVector::zeros(dk);
        let mut hess = DMatrix::zeros(dk, dk);
        for i in 0..n {
            let m = row_dot(k, i, &gamma).clamp(-35.0, 35.0);
            let (w1, w2) = score_weights(link, i < n_study, m);
            for a in 0..dk {
                let ka = k[(i, a)];
                score[a] += w1 * ka;
                for b in 0..=a {
                    hess[(a, b)] += w2 * ka * k[(i, b)];
                }
            }
        }
        for a in 0..dk {
            for b in (a + 1)..dk {
                hess[(a, b)] = hess[(b, a)];
            }
        }

        let score_norm = score.amax() / n as f64;
        if score_norm <= SCORE_TOL {
            // A separated design can drive the score to zero once the fitted
            // probabilities saturate in floating point, so convergence alone
            // does not make the fit trustworthy.
            if let Some(err) = separation_error(k, n_study, link, &gamma) {
                return Err(err);
            }
            return Ok(PropensityFit {
                gamma,
                log_likelihood: ll,
                score_norm,
                iterations: iter - 1,
            });
        }

        let neg_hess = -hess;
        let step = neg_hess
            .lu()
            .solve(&score)
            .ok_or_else(|| Error::numerical("propensity fit", "singular Hessian"))?;

        // A correction at rounding level means the score cannot be pushed
        // further down in floating point; treat the fit as converged.
        if step.amax() <= 1e-10 * (1.0 + gamma.amax()) {
            if let Some(err) = separation_error(k, n_study, link, &gamma) {
                return Err(err);
            }
            return Ok(PropensityFit {
                gamma,
                log_likelihood: ll,
                score_norm,
                iterations: iter - 1,
            });
        }

        // Step halving to guarantee the likelihood does not genuinely
        // decrease. The slack scales with the likelihood's own rounding
        // noise: near the optimum the true gain of the final Newton steps
        // sits below it, and a fixed absolute slack would reject them.
        let slack = 1e-12 * (1.0 + ll.abs());
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &gamma + scale * &step;
            let cand_ll = loglik(&cand);
            if cand_ll > ll - slack {
                gamma = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || gamma.amax() > 1e3 {
            return Err(check_separation(k, n_study, link, &gamma));
        }
    }
    Err(check_separation(k, n_study, link, &gamma))
}

/// Per-row weight of the score (`w1`, so the score row is `w1 * k_i`) and of
/// the Hessian (`w2`, contribution `w2 * k_i k_i'`) at linear index `m`.
fn score_weights(link: LinkFunction, in_study: bool, m: f64) -> (f64, f64) {
    match link {
        LinkFunction::Logit => {
            let p = link.cdf(m);
            (if in_study { 1.0 - p } else { -p }, -p * (1.0 - p))
        }
        _ => {
            let p = link.cdf(m).clamp(1e-300, 1.0 - 1e-16);
            let d = link.pdf(m);
            let dd = link.pdf_prime(m);
            if in_study {
                ((d / p), (dd * p - d * d) / (p * p))
            } else {
                let q = 1.0 - p;
                ((-d / q), -(dd * q + d * d) / (q * q))
            }
        }
    }
}

/// Per-row membership score and the Jacobian of the mean score in the
/// coefficients (the mean log-likelihood Hessian).
pub fn score_rows_and_hessian(
    k: &DMatrix<f64>,
    n_study: usize,
    gamma: &DVector<f64>,
    link: LinkFunction,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = k.nrows();
    let dk = k.ncols();
    let mut rows = DMatrix::zeros(n, dk);
    let mut hess = DMatrix::zeros(dk, dk);
    for i in 0..n {
        let m = row_dot(k, i, gamma).clamp(-35.0, 35.0);
        let (w1, w2) = score_weights(link, i < n_study, m);
        for a in 0..dk {
            let ka = k[(i, a)];
            rows[(i, a)] = w1 * ka;
            for b in 0..dk {
                hess[(a, b)] += w2 * ka * k[(i, b)];
            }
        }
    }
    (rows, hess / n as f64)
}

/// Returns the separation error when more than 1% of rows are fitted at a
/// saturated probability, and `None` for a healthy fit.
fn separation_error(
    k: &DMatrix<f64>,
    n_study: usize,
    link: LinkFunction,
    gamma: &DVector<f64>,
) -> Option<Error> {
    let n = k.nrows();
    let mut extreme = 0usize;
    for i in 0..n {
        let p = link.cdf(row_dot(k, i, gamma));
        let hit = if i < n_study { 1.0 - p } else { p };
        if hit < 1e-6 {
            extreme += 1;
        }
    }
    if extreme as f64 > 0.01 * n as f64 {
        Some(Error::numerical(
            "propensity fit",
            format!(
                "separation detected: {extreme} of {n} rows are fitted at probability 0 or 1"
            ),
        ))
    } else {
        None
    }
}

fn check_separation(
    k: &DMatrix<f64>,
    n_study: usize,
    link: LinkFunction,
    gamma: &DVector<f64>,
) -> Error {
    separation_error(k, n_study, link, gamma)
        .unwrap_or_else(|| Error::numerical("propensity fit", "Newton iterations did not converge"))
}

#[derive(Debug, Clone)]
pub struct TiltFit {
    pub lambda_s: DVector<f64>,
    pub lambda_a: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Residual of one tilting equation at `lambda`, averaged over rows.
///
/// `study_side` selects the equation that reweights study rows (`R/L - 1`);
/// otherwise the auxiliary equation (`(1-R)/(1-L) - 1`) is evaluated.
fn tilt_residual(
    k: &DMatrix<f64>,
    t: &DMatrix<f64>,
    n_study: usize,
    gamma: &DVector<f64>,
    lambda: &DVector<f64>,
    link: LinkFunction,
    study_side: bool,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = k.nrows();
    let dt = t.ncols();
    let mut res = DVector::zeros(dt);
    let mut jac = DMatrix::zeros(dt, dt);
    for i in 0..n {
        let m0 = row_dot(k, i, gamma);
        let l0 = link.cdf(m0);
        let mt = m0 + row_dot(t, i, lambda);
        let lt = link.cdf(mt.clamp(-35.0, 35.0));
        let ltd = link.pdf(mt.clamp(-35.0, 35.0));
        let r = i < n_study;
        let (ri, jw) = if study_side {
            let ind = if r { 1.0 } else { 0.0 };
            let lt = lt.max(1e-12);
            (
                (ind / lt - 1.0) * l0,
                -ind * ltd / (lt * lt) * l0,
            )
        } else {
            let ind = if r { 0.0 } else { 1.0 };
            let q = (1.0 - lt).max(1e-12);
            ((ind / q - 1.0) * l0, ind * ltd / (q * q) * l0)
        };
        for a in 0..dt {
            res[a] += ri * t[(i, a)];
            for b in 0..dt {
                jac[(a, b)] += jw * t[(i, a)] * t[(i, b)];
            }
        }
    }
    res /= n as f64;
    jac /= n as f64;
    (res, jac)
}

fn solve_tilt(
    k: &DMatrix<f64>,
    t: &DMatrix<f64>,
    n_study: usize,
    gamma: &DVector<f64>,
    link: LinkFunction,
    study_side: bool,
) -> Result<(DVector<f64>, f64, usize)> {
    let dt = t.ncols();
    let mut lambda = DVector::zeros(dt);
    let (mut res, mut jac) = tilt_residual(k, t, n_study, gamma, &lambda, link, study_side);
    let mut norm = res.amax();
    for iter in 1..=MAX_ITER {
        if norm <= TILT_TOL {
            return Ok((lambda, norm, iter - 1));
        }
        let step = jac
            .clone()
            .lu()
            .solve(&res)
            .ok_or_else(|| Error::numerical("tilting", "singular tilting Jacobian"))?;
        // Damped Newton: shrink until the residual norm decreases.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &lambda - scale * &step;
            let (cres, cjac) = tilt_residual(k, t, n_study, gamma, &cand, link, study_side);
            let cnorm = cres.amax();
            if cnorm < norm * (1.0 - 1e-4 * scale) || cnorm <= TILT_TOL {
                lambda = cand;
                res = cres;
                jac = cjac;
                norm = cnorm;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::numerical(
                "tilting",
                format!("damped Newton stalled at residual {norm:.3e}"),
            ));
        }
    }
    if norm <= TILT_TOL {
        Ok((lambda, norm, MAX_ITER))
    } else {
        Err(Error::numerical(
            "tilting",
            format!("tilting equations not solved: residual {norm:.3e}"),
        ))
    }
}

/// Solve both tilting equations at the fitted propensity.
///
/// After solving, every tilted probability must respect the probability
/// floor; otherwise the fit is rejected as numerically degenerate.
pub fn fit_tilts(
    k: &DMatrix<f64>,
    t: &DMatrix<f64>,
    n_study: usize,
    gamma: &DVector<f64>,
    link: LinkFunction,
) -> Result<TiltFit> {
    let (lambda_s, norm_s, it_s) = solve_tilt(k, t, n_study, gamma, link, true)?;
    let (lambda_a, norm_a, it_a) = solve_tilt(k, t, n_study, gamma, link, false)?;

    for i in 0..k.nrows() {
        let m0 = row_dot(k, i, gamma);
        for (lam, tag) in [(&lambda_s, "study"), (&lambda_a, "auxiliary")] {
            let p = link.cdf(m0 + row_dot(t, i, lam));
            if !(p > PROB_FLOOR && p < 1.0 - PROB_FLOOR) {
                return Err(Error::numerical(
                    "tilting",
                    format!(
                        "tilted {tag} probability {p:.3e} at row {i} breaches the floor {PROB_FLOOR:.0e}"
                    ),
                ));
            }
        }
    }

    Ok(TiltFit {
        lambda_s,
        lambda_a,
        residual_norm: norm_s.max(norm_a),
        iterations: it_s.max(it_a),
    })
}

/// Per-row tilt weights and likelihood ratios at given parameters.
#[derive(Debug, Clone)]
pub struct TiltWeights {
    /// `L(k'gamma) / L(k'gamma + t'lambda_s)` for every row.
    pub pi_s: Vec<f64>,
    /// `L(k'gamma) / (1 - L(k'gamma + t'lambda_a))` for every row.
    pub pi_a: Vec<f64>,
}

pub fn compute_tilt_weights(
    k: &DMatrix<f64>,
    t: &DMatrix<f64>,
    gamma: &DVector<f64>,
    lambda_s: &DVector<f64>,
    lambda_a: &DVector<f64>,
    link: LinkFunction,
) -> TiltWeights {
    let n = k.nrows();
    let mut pi_s = Vec::with_capacity(n);
    let mut pi_a = Vec::with_capacity(n);
    for i in 0..n {
        let m0 = row_dot(k, i, gamma);
        let l0 = link.cdf(m0);
        let ls = link.cdf(m0 + row_dot(t, i, lambda_s));
        let la = link.cdf(m0 + row_dot(t, i, lambda_a));
        pi_s.push(l0 / ls.max(1e-300));
        pi_a.push(l0 / (1.0 - la).max(1e-300));
    }
    TiltWeights { pi_s, pi_a }
}

/// Likelihood ratio `(n_a/n_s) L_s / (1 - L_a)` for every row; on auxiliary
/// rows this transports auxiliary averages into the study population.
pub fn likelihood_ratio(
    k: &DMatrix<f64>,
    t: &DMatrix<f64>,
    n_study: usize,
    gamma: &DVector<f64>,
    lambda_s: &DVector<f64>,
    lambda_a: &DVector<f64>,
    link: LinkFunction,
) -> Vec<f64> {
    let n = k.nrows();
    let ratio = (n - n_study) as f64 / n_study as f64;
    (0..n)
        .map(|i| {
            let m0 = row_dot(k, i, gamma);
            let ls = link.cdf(m0 + row_dot(t, i, lambda_s));
            let la = link.cdf(m0 + row_dot(t, i, lambda_a));
            ratio * ls / (1.0 - la).max(1e-300)
        })
        .collect()
}

/// Largest componentwise gap between the tilted study and auxiliary averages
/// of the tilting basis: `E_n[R pi_s t] - E_n[(1-R) pi_a t]`.
pub fn balance_gap(t: &DMatrix<f64>, n_study: usize, weights: &TiltWeights) -> f64 {
    let n = t.nrows();
    let mut worst: f64 = 0.0;
    for j in 0..t.ncols() {
        let mut study = 0.0;
        let mut aux = 0.0;
        for i in 0..n {
            if i < n_study {
                study += weights.pi_s[i] * t[(i, j)];
            } else {
                aux += weights.pi_a[i] * t[(i, j)];
            }
        }
        worst = worst.max(((study - aux) / n as f64).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn intercept_only(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn balanced_intercept_fit_is_zero() {
        let k = intercept_only(10);
        let fit = fit_propensity(&k, 5, LinkFunction::Logit).unwrap();
        assert_abs_diff_eq!(fit.gamma[0], 0.0, epsilon = 1e-8);
        let fitp = fit_propensity(&k, 5, LinkFunction::Probit).unwrap();
        assert_abs_diff_eq!(fitp.gamma[0], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn three_to_one_intercept_fit() {
        let k = intercept_only(4);
        let fit = fit_propensity(&k, 3, LinkFunction::Logit).unwrap();
        assert_relative_eq!(fit.gamma[0], 1.0986122886681098, epsilon = 1e-7);
    }

    fn simulated_design(n: usize, seed: u64) -> (DMatrix<f64>, usize) {
        // One standard-normal covariate; membership from a logit index.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<(bool, f64)> = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                let p = LinkFunction::Logit.cdf(-0.2 + 0.8 * z);
                (rng.gen::<f64>() < p, z)
            })
            .collect();
        rows.sort_by_key(|&(r, _)| !r);
        let n_study = rows.iter().filter(|&&(r, _)| r).count();
        let mut k = DMatrix::zeros(n, 2);
        for (i, &(_, z)) in rows.iter().enumerate() {
            k[(i, 0)] = 1.0;
            k[(i, 1)] = z;
        }
        (k, n_study)
    }

    #[test]
    fn recovers_logit_coefficients() {
        let (k, n_study) = simulated_design(40_000, 5);
        let fit = fit_propensity(&k, n_study, LinkFunction::Logit).unwrap();
        assert_abs_diff_eq!(fit.gamma[0], -0.2, epsilon = 0.05);
        assert_abs_diff_eq!(fit.gamma[1], 0.8, epsilon = 0.05);
        assert!(fit.score_norm <= 1e-8);
    }

    #[test]
    fn rescaling_a_column_rescales_the_coefficient() {
        let (k, n_study) = simulated_design(2_000, 9);
        let fit = fit_propensity(&k, n_study, LinkFunction::Logit).unwrap();
        let mut k2 = k.clone();
        for i in 0..k2.nrows() {
            k2[(i, 1)] *= 10.0;
        }
        let fit2 = fit_propensity(&k2, n_study, LinkFunction::Logit).unwrap();
        assert_relative_eq!(fit2.gamma[1], fit.gamma[1] / 10.0, epsilon = 1e-6);
        for i in [0usize, 17, 1213] {
            let p1 = LinkFunction::Logit.cdf(k.row(i).transpose().dot(&fit.gamma));
            let p2 = LinkFunction::Logit.cdf(k2.row(i).transpose().dot(&fit2.gamma));
            assert_abs_diff_eq!(p1, p2, epsilon = 1e-8);
        }
    }

    #[test]
    fn perfect_separation_is_reported() {
        // z < 0 exactly for auxiliary rows: the likelihood has no maximizer.
        let n = 200;
        let mut k = DMatrix::zeros(n, 2);
        for i in 0..n {
            k[(i, 0)] = 1.0;
            k[(i, 1)] = if i < 100 { 1.0 + (i % 7) as f64 } else { -1.0 - (i % 5) as f64 };
        }
        let err = fit_propensity(&k, 100, LinkFunction::Logit).unwrap_err();
        assert!(err.to_string().contains("separation"), "{err}");
    }

    #[test]
    fn balanced_intercept_tilts_are_zero() {
        let k = intercept_only(8);
        let t = intercept_only(8);
        let fit = fit_propensity(&k, 4, LinkFunction::Logit).unwrap();
        let tilts = fit_tilts(&k, &t, 4, &fit.gamma, LinkFunction::Logit).unwrap();
        assert_abs_diff_eq!(tilts.lambda_s[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(tilts.lambda_a[0], 0.0, epsilon = 1e-9);
    }

    /// Independent scalar bisection on the one-dimensional tilting residual,
    /// compared against the Newton solution.
    #[test]
    fn one_dimensional_tilt_matches_bisection() {
        let k = intercept_only(4);
        let t = intercept_only(4);
        let n_study = 1;
        let fit = fit_propensity(&k, n_study, LinkFunction::Logit).unwrap();
        let tilts = fit_tilts(&k, &t, n_study, &fit.gamma, LinkFunction::Logit).unwrap();

        let residual = |lam: f64| {
            let lv = DVector::from_element(1, lam);
            tilt_residual(&k, &t, n_study, &fit.gamma, &lv, LinkFunction::Logit, false)
                .0[0]
        };
        let (mut lo, mut hi) = (-5.0, 5.0);
        assert!(residual(lo) * residual(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if residual(lo) * residual(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        assert_abs_diff_eq!(tilts.lambda_a[0], root, epsilon = 1e-8);
        // This particular design balances at zero tilt.
        assert_abs_diff_eq!(root, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn tilting_balances_the_basis() {
        let (k, n_study) = simulated_design(5_000, 21);
        let t = k.clone();
        let fit = fit_propensity(&k, n_study, LinkFunction::Logit).unwrap();
        let tilts = fit_tilts(&k, &t, n_study, &fit.gamma, LinkFunction::Logit).unwrap();
        let w = compute_tilt_weights(&k, &t, &fit.gamma, &tilts.lambda_s, &tilts.lambda_a, LinkFunction::Logit);
        assert!(balance_gap(&t, n_study, &w) <= 1e-6);
    }

    #[test]
    fn likelihood_ratio_at_zero_parameters() {
        let k = intercept_only(400);
        let t = intercept_only(400);
        let zero = DVector::zeros(1);
        let ell = likelihood_ratio(&k, &t, 100, &zero, &zero, &zero, LinkFunction::Logit);
        for v in ell {
            assert_relative_eq!(v, 3.0);
        }
    }

    #[test]
    fn likelihood_ratio_mean_is_near_one() {
        let (k, n_study) = simulated_design(20_000, 33);
        let t = k.clone();
        let link = LinkFunction::Logit;
        let fit = fit_propensity(&k, n_study, link).unwrap();
        let tilts = fit_tilts(&k, &t, n_study, &fit.gamma, link).unwrap();
        let ell = likelihood_ratio(&k, &t, n_study, &fit.gamma, &tilts.lambda_s, &tilts.lambda_a, link);
        let n_aux = k.nrows() - n_study;
        let mean: f64 = ell[n_study..].iter().sum::<f64>() / n_aux as f64;
        assert_abs_diff_eq!(mean, 1.0, epsilon = 0.02);
    }
}
