//! Effect estimation and inference.
//!
//! The effect of a marginal covariate shift on an outcome quantile is the
//! ratio of a reweighted derivative average (the numerator) and the outcome
//! density at that quantile. This module evaluates the numerator together
//! with its exact Jacobian in the fitted parameters, assembles influence
//! functions for the whole estimation chain (quantile, propensity, tilting,
//! outcome model, and the estimated covariate distribution inside the
//! direction function), and reports the point estimate, standard errors, a
//! first-order bias term, and a test of zero effect.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::EstimatorConfig;
use crate::counterfactual::{CounterfactualDistribution, ShiftKind};
use crate::error::{Error, Result};
use crate::estimator::{DesignFit, ThetaEstimate};
use crate::link::{normal_cdf, normal_quantile, LinkFunction};
use crate::nonparam::{gaussian_kde_second_derivative, WeightedKde};
use crate::outcome::moment_rows;
use crate::propensity::{likelihood_ratio, score_rows_and_hessian};
use crate::sample::MergedSample;

/// Effect estimate with inference for one quantile level and shift kind.
#[derive(Debug, Clone, Serialize)]
pub struct UqeResult {
    pub kind: ShiftKind,
    pub tau: f64,
    pub counterfactual: String,
    pub q_hat: f64,
    pub f_y_at_q: f64,
    /// Numerator: reweighted average of the outcome-model derivative times
    /// the direction function.
    pub d_hat: f64,
    /// Effect estimate `-d_hat / f_y_at_q`.
    pub point: f64,
    /// First-order smoothing bias of the point estimate.
    pub bias: f64,
    /// Standard error used for the interval.
    pub se: f64,
    pub se_plugin: f64,
    /// Influence-function standard error; absent when the parameter
    /// covariance system is singular.
    pub se_improved: Option<f64>,
    pub ci_level: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// Test of zero effect based on the numerator's influence function.
    pub zero_stat: Option<f64>,
    pub zero_p: Option<f64>,
    /// Auxiliary rows excluded by boundary trimming or the density floor
    /// (distribution shift only).
    pub dropped_rows: usize,
    /// Condition number of the stacked parameter Jacobian.
    pub jacobian_condition: f64,
    /// Set when inference fell back to the plug-in variance.
    pub used_plugin_fallback: bool,
}

/// Offsets of the stacked parameter vector `(q, gamma, lambda_s, lambda_a,
/// beta)`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    dk: usize,
    dt: usize,
    p: usize,
}

impl Layout {
    fn dim(self) -> usize {
        1 + self.dk + 2 * self.dt + self.p
    }
    fn gamma(self) -> usize {
        1
    }
    fn ls(self) -> usize {
        1 + self.dk
    }
    fn la(self) -> usize {
        1 + self.dk + self.dt
    }
    fn beta(self) -> usize {
        1 + self.dk + 2 * self.dt
    }
}

fn row_dot(m: &DMatrix<f64>, i: usize, v: &DVector<f64>) -> f64 {
    (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum()
}

/// Link values at the base and tilted indexes of one row.
#[derive(Debug, Clone, Copy)]
struct RowLinks {
    l0: f64,
    l0d: f64,
    ls: f64,
    lsd: f64,
    la: f64,
    lad: f64,
}

fn all_row_links(
    k: &DMatrix<f64>,
    t: &DMatrix<f64>,
    gamma: &DVector<f64>,
    lambda_s: &DVector<f64>,
    lambda_a: &DVector<f64>,
    link: LinkFunction,
) -> Vec<RowLinks> {
    (0..k.nrows())
        .map(|i| {
            let m0 = row_dot(k, i, gamma);
            let ms = m0 + row_dot(t, i, lambda_s);
            let ma = m0 + row_dot(t, i, lambda_a);
            RowLinks {
                l0: link.cdf(m0),
                l0d: link.pdf(m0),
                ls: link.cdf(ms).max(1e-300),
                lsd: link.pdf(ms),
                la: link.cdf(ma).min(1.0 - 1e-300),
                lad: link.pdf(ma),
            }
        })
        .collect()
}

/// Direction value ignoring trimming; callers apply the keep mask.
fn raw_direction(
    kind: ShiftKind,
    g: &CounterfactualDistribution,
    f_tilde: &CounterfactualDistribution,
    x_kde: &WeightedKde,
    x: f64,
) -> f64 {
    match kind {
        ShiftKind::Mls => 1.0,
        ShiftKind::Mqs => g.quantile(f_tilde.cdf(x)) - x,
        ShiftKind::Mds => -(g.cdf(x) - f_tilde.cdf(x)) / x_kde.density(x),
    }
}

/// Everything the numerator evaluation produces, per auxiliary row.
struct NumeratorEval {
    /// Likelihood ratio per auxiliary row.
    rho: Vec<f64>,
    /// Outcome-model probability per auxiliary row.
    lam: Vec<f64>,
    /// Covariate derivative of the outcome model per auxiliary row.
    lam_x: Vec<f64>,
    /// Coefficient gradient of `lam_x`, one row per auxiliary row.
    lam_xbeta: DMatrix<f64>,
    /// Direction value on kept rows (unused entries are zero).
    gval: Vec<f64>,
    keep: Vec<bool>,
    m_keep: usize,
    d_hat: f64,
    f_tilde: CounterfactualDistribution,
    x_kde: WeightedKde,
}

fn eval_numerator(
    sample: &MergedSample,
    design: &DesignFit,
    config: &EstimatorConfig,
    kind: ShiftKind,
    g: &CounterfactualDistribution,
    gamma: &DVector<f64>,
    lambda_s: &DVector<f64>,
    lambda_a: &DVector<f64>,
    beta: &DVector<f64>,
    frozen_keep: Option<&[bool]>,
) -> Result<NumeratorEval> {
    let n_s = sample.n_study();
    let link = config.propensity_link;
    let ell = likelihood_ratio(&design.k, &design.t, n_s, gamma, lambda_s, lambda_a, link);
    let rho: Vec<f64> = sample.aux_rows().map(|i| ell[i]).collect();
    let xs: &[f64] = &sample.x;
    let m_a = xs.len();

    let f_tilde = CounterfactualDistribution::from_sample(xs, Some(&rho))?;
    let rho_sum: f64 = rho.iter().sum();
    let mean_one: Vec<f64> = rho.iter().map(|r| r * m_a as f64 / rho_sum).collect();
    let x_kde = WeightedKde::new(xs, Some(&mean_one), config.x_kernel, design.b_x)?;

    let (phi, phi_x) = design.model.aux_features(sample)?;
    let p = design.model.dim();
    let olink = design.model.link;
    let mut lam = Vec::with_capacity(m_a);
    let mut lam_x = Vec::with_capacity(m_a);
    let mut lam_xbeta = DMatrix::zeros(m_a, p);
    for a in 0..m_a {
        let m: f64 = (0..p).map(|j| phi[(a, j)] * beta[j]).sum();
        let s: f64 = (0..p).map(|j| phi_x[(a, j)] * beta[j]).sum();
        let l1 = olink.pdf(m);
        let l2 = olink.pdf_prime(m);
        lam.push(olink.cdf(m));
        lam_x.push(l1 * s);
        for j in 0..p {
            lam_xbeta[(a, j)] = l2 * s * phi[(a, j)] + l1 * phi_x[(a, j)];
        }
    }

    let keep: Vec<bool> = match frozen_keep {
        Some(kv) => {
            if kv.len() != m_a {
                return Err(Error::validation("frozen keep mask length mismatch"));
            }
            kv.to_vec()
        }
        None => match kind {
            ShiftKind::Mds => xs
                .iter()
                .map(|&x| x_kde.in_trim(x) && x_kde.density(x) >= config.density_floor)
                .collect(),
            _ => vec![true; m_a],
        },
    };

    let mut gval = vec![0.0; m_a];
    let mut m_keep = 0usize;
    let mut acc = 0.0;
    for a in 0..m_a {
        if keep[a] {
            let v = raw_direction(kind, g, &f_tilde, &x_kde, xs[a]);
            gval[a] = v;
            acc += rho[a] * lam_x[a] * v;
            m_keep += 1;
        }
    }
    if m_keep == 0 {
        return Err(Error::numerical(
            "effect numerator",
            "every auxiliary row was excluded by trimming or the density floor",
        ));
    }
    Ok(NumeratorEval {
        rho,
        lam,
        lam_x,
        lam_xbeta,
        gval,
        keep,
        m_keep,
        d_hat: acc / m_keep as f64,
        f_tilde,
        x_kde,
    })
}

/// Numerator value at given parameters, with the keep mask used.
///
/// Bandwidths and the keep mask (when supplied) stay fixed, so the function
/// is smooth in the parameters and suitable for derivative checks against
/// the analytic Jacobian.
pub fn numerator_at(
    sample: &MergedSample,
    design: &DesignFit,
    config: &EstimatorConfig,
    kind: ShiftKind,
    g: &CounterfactualDistribution,
    gamma: &DVector<f64>,
    lambda_s: &DVector<f64>,
    lambda_a: &DVector<f64>,
    beta: &DVector<f64>,
    frozen_keep: Option<&[bool]>,
) -> Result<(f64, Vec<bool>)> {
    let ev = eval_numerator(
        sample, design, config, kind, g, gamma, lambda_s, lambda_a, beta, frozen_keep,
    )?;
    Ok((ev.d_hat, ev.keep))
}

/// Analytic gradient of the numerator in the stacked parameter vector
/// `(quantile | propensity | tilts | outcome)`, evaluated at the supplied
/// parameters. The quantile entry is exactly zero. Companion to
/// [`numerator_at`] for derivative checks.
#[allow(clippy::too_many_arguments)]
pub fn numerator_gradient(
    sample: &MergedSample,
    design: &DesignFit,
    config: &EstimatorConfig,
    kind: ShiftKind,
    g: &CounterfactualDistribution,
    gamma: &DVector<f64>,
    lambda_s: &DVector<f64>,
    lambda_a: &DVector<f64>,
    beta: &DVector<f64>,
    frozen_keep: Option<&[bool]>,
) -> Result<DVector<f64>> {
    let ev = eval_numerator(
        sample, design, config, kind, g, gamma, lambda_s, lambda_a, beta, frozen_keep,
    )?;
    let lay = Layout {
        dk: design.k.ncols(),
        dt: design.t.ncols(),
        p: design.model.dim(),
    };
    let links = all_row_links(
        &design.k,
        &design.t,
        gamma,
        lambda_s,
        lambda_a,
        config.propensity_link,
    );
    Ok(numerator_jacobian(sample, design, kind, g, &ev, &links, lay))
}

/// Auxiliary rows sorted by covariate value.
struct SortedAux {
    order: Vec<usize>,
    xs: Vec<f64>,
}

fn sort_aux(xs: &[f64]) -> SortedAux {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    SortedAux {
        xs: order.iter().map(|&a| xs[a]).collect(),
        order,
    }
}

/// Derivative of the estimated status-quo covariate CDF in the propensity
/// and tilting parameters, evaluated through the interpolant's knots.
struct FtildeDeriv {
    knot_x: Vec<f64>,
    /// Row `j`: derivative of the knot probability `p_j`.
    dknot: DMatrix<f64>,
}

impl FtildeDeriv {
    /// Build from the sorted weight-gradient table. `t_rows[k]` is the
    /// derivative of the normalized weight of sorted row `k`; the knot
    /// probability is the left-cumulative weight rescaled by one minus the
    /// top row's weight, and its derivative follows the quotient rule.
    fn build(
        sorted: &SortedAux,
        w_norm: &[f64],
        t_rows: &DMatrix<f64>,
        f_tilde: &CounterfactualDistribution,
    ) -> FtildeDeriv {
        let m = sorted.xs.len();
        let pdim = t_rows.ncols();
        let denom = 1.0 - w_norm[m - 1];
        // Prefix sums of the weight derivatives: u[s] covers rows 0..s.
        let mut u: DMatrix<f64> = DMatrix::zeros(m + 1, pdim);
        for s in 0..m {
            for j in 0..pdim {
                u[(s + 1, j)] = u[(s, j)] + t_rows[(s, j)];
            }
        }
        let mut knot_x = Vec::new();
        let mut reps = Vec::new();
        for s in 0..m {
            if s + 1 < m && sorted.xs[s + 1] == sorted.xs[s] {
                continue;
            }
            knot_x.push(sorted.xs[s]);
            reps.push(s);
        }
        let nk = knot_x.len();
        let mut dknot = DMatrix::zeros(nk, pdim);
        for (j, &s) in reps.iter().enumerate() {
            let p_knot = f_tilde.cdf(knot_x[j]);
            for c in 0..pdim {
                dknot[(j, c)] =
                    (u[(s, c)] + p_knot * t_rows[(m - 1, c)]) / denom;
            }
        }
        FtildeDeriv { knot_x, dknot }
    }

    /// Derivative vector of `F_tilde(x)`.
    ///
    /// The CDF is constant zero below the first knot and constant one at and
    /// above the last (whose probability is pinned), so the derivative
    /// vanishes there.
    fn eval(&self, x: f64, out: &mut DVector<f64>) {
        out.fill(0.0);
        let nk = self.knot_x.len();
        if nk < 2 || x < self.knot_x[0] || x >= self.knot_x[nk - 1] {
            return;
        }
        match self.knot_x.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(j) => {
                for c in 0..out.len() {
                    out[c] = self.dknot[(j, c)];
                }
            }
            Err(j) => {
                let alpha = (x - self.knot_x[j - 1]) / (self.knot_x[j] - self.knot_x[j - 1]);
                for c in 0..out.len() {
                    out[c] = (1.0 - alpha) * self.dknot[(j - 1, c)] + alpha * self.dknot[(j, c)];
                }
            }
        }
    }
}

/// Exact Jacobian of the numerator in the stacked parameters.
///
/// The quantile entry is zero (the numerator has no direct quantile
/// dependence); the propensity and tilting blocks include both the
/// likelihood-ratio channel and the channel through the reweighted covariate
/// distribution and density inside the direction function.
fn numerator_jacobian(
    sample: &MergedSample,
    design: &DesignFit,
    kind: ShiftKind,
    g: &CounterfactualDistribution,
    ev: &NumeratorEval,
    links: &[RowLinks],
    lay: Layout,
) -> DVector<f64> {
    let n_s = sample.n_study();
    let m_a = ev.rho.len();
    let pdim = lay.dk + 2 * lay.dt;
    let mut mjac: DVector<f64> = DVector::zeros(lay.dim());

    // Gradient of the raw likelihood ratio of each auxiliary row in
    // (gamma, lambda_s, lambda_a), laid out in that order.
    let mut grad_rho: DMatrix<f64> = DMatrix::zeros(m_a, pdim);
    let mut grad_sum: DVector<f64> = DVector::zeros(pdim);
    for a in 0..m_a {
        let i = n_s + a;
        let rl = links[i];
        let cs = rl.lsd / rl.ls;
        let ca = rl.lad / (1.0 - rl.la);
        for j in 0..lay.dk {
            grad_rho[(a, j)] = ev.rho[a] * (cs + ca) * design.k[(i, j)];
        }
        for j in 0..lay.dt {
            grad_rho[(a, lay.dk + j)] = ev.rho[a] * cs * design.t[(i, j)];
            grad_rho[(a, lay.dk + lay.dt + j)] = ev.rho[a] * ca * design.t[(i, j)];
        }
        for j in 0..pdim {
            grad_sum[j] += grad_rho[(a, j)];
        }
    }

    // Direction-function sensitivity needs the sorted weight machinery.
    let needs_distribution = !matches!(kind, ShiftKind::Mls);
    let sorted = sort_aux(&sample.x);
    let rho_sum: f64 = ev.rho.iter().sum();
    let mut df_at: Vec<DVector<f64>> = Vec::new();
    let mut dfhat_at: Vec<DVector<f64>> = Vec::new();
    if needs_distribution {
        let w_norm: Vec<f64> = sorted.order.iter().map(|&a| ev.rho[a] / rho_sum).collect();
        let mut t_rows = DMatrix::zeros(m_a, pdim);
        for (s, &a) in sorted.order.iter().enumerate() {
            for j in 0..pdim {
                t_rows[(s, j)] = (grad_rho[(a, j)] - w_norm[s] * grad_sum[j]) / rho_sum;
            }
        }
        let ftd = FtildeDeriv::build(&sorted, &w_norm, &t_rows, &ev.f_tilde);
        let mut buf: DVector<f64> = DVector::zeros(pdim);
        df_at = (0..m_a)
            .map(|a| {
                ftd.eval(sample.x[a], &mut buf);
                buf.clone()
            })
            .collect();
        if matches!(kind, ShiftKind::Mds) {
            // Derivative of the weighted covariate density at each point:
            // the kernel average of the weight derivatives.
            let b = design.b_x;
            dfhat_at = (0..m_a)
                .map(|a| {
                    let x = sample.x[a];
                    let lo = sorted.xs.partition_point(|&v| v < x - b);
                    let hi = sorted.xs.partition_point(|&v| v <= x + b);
                    let mut acc: DVector<f64> = DVector::zeros(pdim);
                    for s in lo..hi {
                        let kv = ev.x_kde.kernel.eval((sorted.xs[s] - x) / b) / b;
                        for j in 0..pdim {
                            acc[j] += t_rows[(s, j)] * kv;
                        }
                    }
                    acc
                })
                .collect();
        }
    }

    let mf = ev.m_keep as f64;
    for a in 0..m_a {
        if !ev.keep[a] {
            continue;
        }
        let x = sample.x[a];
        let core = ev.lam_x[a] * ev.gval[a];
        for j in 0..pdim {
            mjac[1 + j] += grad_rho[(a, j)] * core / mf;
        }
        match kind {
            ShiftKind::Mls => {}
            ShiftKind::Mqs => {
                let slope = g.pdf(g.quantile(ev.f_tilde.cdf(x))).max(1e-300);
                let w = ev.rho[a] * ev.lam_x[a] / slope;
                for j in 0..pdim {
                    mjac[1 + j] += w * df_at[a][j] / mf;
                }
            }
            ShiftKind::Mds => {
                let fx = ev.x_kde.density(x);
                let diff = g.cdf(x) - ev.f_tilde.cdf(x);
                let w1 = ev.rho[a] * ev.lam_x[a] / fx;
                let w2 = ev.rho[a] * ev.lam_x[a] * diff / (fx * fx);
                for j in 0..pdim {
                    mjac[1 + j] += (w1 * df_at[a][j] + w2 * dfhat_at[a][j]) / mf;
                }
            }
        }
        for j in 0..lay.p {
            mjac[lay.beta() + j] += ev.rho[a] * ev.gval[a] * ev.lam_xbeta[(a, j)] / mf;
        }
    }
    mjac
}

/// Influence rows of the stacked parameter estimate, one row per
/// observation, together with the condition number of the stacked Jacobian.
/// The rows are `None` when that Jacobian is singular.
fn parameter_influence(
    sample: &MergedSample,
    design: &DesignFit,
    theta: &ThetaEstimate,
    config: &EstimatorConfig,
    ev: &NumeratorEval,
    links: &[RowLinks],
    lay: Layout,
) -> Result<(Option<DMatrix<f64>>, f64)> {
    let n = sample.n();
    let n_s = sample.n_study();
    let d = lay.dim();
    let q0 = sample.q0_hat();
    let fq = theta.f_y_at_q.value;
    let q_hat = theta.q_hat;
    let tau = theta.tau;

    let (score_rows, hess) = score_rows_and_hessian(
        &design.k,
        n_s,
        &design.propensity.gamma,
        config.propensity_link,
    );
    let grows = moment_rows(
        sample,
        &design.e,
        &design.pi_s,
        &design.pi_a,
        q_hat,
        &design.model,
        &theta.beta,
    )?;
    // Fixed weighting of the outcome moments in the estimating equation.
    let w = theta.gmm.jacobian.transpose() * &theta.gmm.weight;
    let de = design.e.ncols();

    let mut phi = DMatrix::zeros(n, d);
    let mut jac = DMatrix::zeros(d, d);
    jac[(0, 0)] = -q0 * fq;
    for a in 0..lay.dk {
        for b in 0..lay.dk {
            jac[(lay.gamma() + a, lay.gamma() + b)] = hess[(a, b)];
        }
    }

    let nf = n as f64;
    let mut jbq = DVector::zeros(de);
    let mut jbg = DMatrix::zeros(de, lay.dk);
    let mut jbs = DMatrix::zeros(de, lay.dt);
    let mut jba = DMatrix::zeros(de, lay.dt);
    for i in 0..n {
        let r = sample.r(i);
        let rl = links[i];
        let rf = if r { 1.0 } else { 0.0 };

        if r {
            let y = sample.y_at(i).expect("study row");
            phi[(i, 0)] = tau - if y <= q_hat { 1.0 } else { 0.0 };
        }
        for a in 0..lay.dk {
            phi[(i, lay.gamma() + a)] = score_rows[(i, a)];
        }
        let phis = (rf / rl.ls - 1.0) * rl.l0;
        let phia = ((1.0 - rf) / (1.0 - rl.la) - 1.0) * rl.l0;
        for a in 0..lay.dt {
            phi[(i, lay.ls() + a)] = phis * design.t[(i, a)];
            phi[(i, lay.la() + a)] = phia * design.t[(i, a)];
        }
        for a in 0..lay.p {
            let mut acc = 0.0;
            for b in 0..de {
                acc += w[(a, b)] * grows[(i, b)];
            }
            phi[(i, lay.beta() + a)] = acc;
        }

        // Tilting equation Jacobian blocks.
        let cs = rl.lsd / (rl.ls * rl.ls);
        let ca = rl.lad / ((1.0 - rl.la) * (1.0 - rl.la));
        let dsg = -rf * cs * rl.l0 + (rf / rl.ls - 1.0) * rl.l0d;
        let dag = (1.0 - rf) * ca * rl.l0 + ((1.0 - rf) / (1.0 - rl.la) - 1.0) * rl.l0d;
        let dss = -rf * cs * rl.l0;
        let daa = (1.0 - rf) * ca * rl.l0;
        for a in 0..lay.dt {
            let ta = design.t[(i, a)];
            for b in 0..lay.dk {
                let kb = design.k[(i, b)];
                jac[(lay.ls() + a, lay.gamma() + b)] += dsg * ta * kb / nf;
                jac[(lay.la() + a, lay.gamma() + b)] += dag * ta * kb / nf;
            }
            for b in 0..lay.dt {
                let tb = design.t[(i, b)];
                jac[(lay.ls() + a, lay.ls() + b)] += dss * ta * tb / nf;
                jac[(lay.la() + a, lay.la() + b)] += daa * ta * tb / nf;
            }
        }

        // Outcome-moment Jacobian blocks.
        if r {
            let y = sample.y_at(i).expect("study row");
            let hit = if y <= q_hat { 1.0 } else { 0.0 };
            let kq = design.f_y_kde.kernel.eval((y - q_hat) / design.b_y) / design.b_y;
            // d pi_s / d gamma and / d lambda_s coefficients.
            let cps = (rl.l0d * rl.ls - rl.l0 * rl.lsd) / (rl.ls * rl.ls);
            let cls = -rl.l0 * rl.lsd / (rl.ls * rl.ls);
            let pis = design.pi_s[i];
            for b in 0..de {
                let eb = design.e[(i, b)];
                jbq[b] += pis * eb * kq / nf;
                for c in 0..lay.dk {
                    jbg[(b, c)] += hit * cps * eb * design.k[(i, c)] / nf;
                }
                for c in 0..lay.dt {
                    jbs[(b, c)] += hit * cls * eb * design.t[(i, c)] / nf;
                }
            }
        } else {
            let lam = ev.lam[i - n_s];
            let q1 = 1.0 - rl.la;
            let cpa = (rl.l0d * q1 + rl.l0 * rl.lad) / (q1 * q1);
            let cla = rl.l0 * rl.lad / (q1 * q1);
            for b in 0..de {
                let eb = design.e[(i, b)];
                for c in 0..lay.dk {
                    jbg[(b, c)] -= lam * cpa * eb * design.k[(i, c)] / nf;
                }
                for c in 0..lay.dt {
                    jba[(b, c)] -= lam * cla * eb * design.t[(i, c)] / nf;
                }
            }
        }
    }

    let wbq = &w * &jbq;
    let wbg = &w * &jbg;
    let wbs = &w * &jbs;
    let wba = &w * &jba;
    let wbb = &w * &theta.gmm.jacobian;
    for a in 0..lay.p {
        jac[(lay.beta() + a, 0)] = wbq[a];
        for b in 0..lay.dk {
            jac[(lay.beta() + a, lay.gamma() + b)] = wbg[(a, b)];
        }
        for b in 0..lay.dt {
            jac[(lay.beta() + a, lay.ls() + b)] = wbs[(a, b)];
            jac[(lay.beta() + a, lay.la() + b)] = wba[(a, b)];
        }
        for b in 0..lay.p {
            jac[(lay.beta() + a, lay.beta() + b)] = wbb[(a, b)];
        }
    }

    let sv = jac.clone().svd(false, false).singular_values;
    let (s_max, s_min) = (sv.max(), sv.min());
    let condition = if s_min > 0.0 { s_max / s_min } else { f64::INFINITY };
    let inv_t = match jac.transpose().lu().solve(&DMatrix::identity(d, d)) {
        Some(m) => m,
        None => return Ok((None, condition)),
    };
    Ok((Some(-(phi * inv_t)), condition))
}

/// Influence of estimating the covariate distribution (and, for the
/// distribution shift, its density) inside the direction function. Only
/// auxiliary rows contribute.
fn direction_influence(
    sample: &MergedSample,
    design: &DesignFit,
    kind: ShiftKind,
    g: &CounterfactualDistribution,
    ev: &NumeratorEval,
) -> Vec<f64> {
    let n = sample.n();
    let n_s = sample.n_study();
    let m_a = ev.rho.len();
    let mut out = vec![0.0; n];
    if matches!(kind, ShiftKind::Mls) {
        return out;
    }
    let sorted = sort_aux(&sample.x);
    let mf = ev.m_keep as f64;
    let aux_share = 1.0 - sample.q0_hat();

    // Per kept row: the sensitivity coefficient of the direction to a CDF
    // perturbation at that row's covariate value.
    let coef: Vec<f64> = (0..m_a)
        .map(|a| {
            if !ev.keep[a] {
                return 0.0;
            }
            let x = sample.x[a];
            match kind {
                ShiftKind::Mls => 0.0,
                ShiftKind::Mqs => {
                    let slope = g.pdf(g.quantile(ev.f_tilde.cdf(x))).max(1e-300);
                    ev.rho[a] * ev.lam_x[a] / slope
                }
                ShiftKind::Mds => ev.rho[a] * ev.lam_x[a] / ev.x_kde.density(x),
            }
        })
        .collect();

    // Suffix sums of the coefficients over rows sorted by covariate value,
    // so that the term sum_k coef_k 1(x_i <= x_k) is a single lookup.
    let mut suffix = vec![0.0; m_a + 1];
    for s in (0..m_a).rev() {
        suffix[s] = suffix[s + 1] + coef[sorted.order[s]];
    }
    let mut centered = 0.0;
    for a in 0..m_a {
        centered += coef[a] * ev.f_tilde.cdf(sample.x[a]);
    }

    // Distribution shift only: sensitivity to the density estimate.
    let (dens_coef, dens_centered) = if matches!(kind, ShiftKind::Mds) {
        let c: Vec<f64> = (0..m_a)
            .map(|a| {
                if !ev.keep[a] {
                    return 0.0;
                }
                let x = sample.x[a];
                let fx = ev.x_kde.density(x);
                ev.rho[a] * ev.lam_x[a] * (g.cdf(x) - ev.f_tilde.cdf(x)) / (fx * fx)
            })
            .collect();
        let cc: f64 = (0..m_a)
            .map(|a| c[a] * ev.x_kde.density(sample.x[a]))
            .sum();
        (c, cc)
    } else {
        (Vec::new(), 0.0)
    };
    let dens_sorted: Vec<f64> = if dens_coef.is_empty() {
        Vec::new()
    } else {
        sorted.order.iter().map(|&a| dens_coef[a]).collect()
    };

    let b = design.b_x;
    for a in 0..m_a {
        let i = n_s + a;
        let x = sample.x[a];
        let lo = sorted.xs.partition_point(|&v| v < x);
        let mut s = suffix[lo] - centered;
        if matches!(kind, ShiftKind::Mds) {
            let klo = sorted.xs.partition_point(|&v| v < x - b);
            let khi = sorted.xs.partition_point(|&v| v <= x + b);
            let mut ksum = 0.0;
            for sidx in klo..khi {
                ksum += dens_sorted[sidx] * ev.x_kde.kernel.eval((x - sorted.xs[sidx]) / b) / b;
            }
            s += ksum - dens_centered;
        }
        out[i] = ev.rho[a] * s / (aux_share * mf);
    }
    out
}

fn two_sided_p(stat: f64) -> f64 {
    2.0 * (1.0 - normal_cdf(stat.abs()))
}

/// Estimate the effect of one shift kind at one quantile level.
pub fn estimate_uqe(
    sample: &MergedSample,
    theta: &ThetaEstimate,
    kind: ShiftKind,
    g: &CounterfactualDistribution,
    config: &EstimatorConfig,
) -> Result<UqeResult> {
    let design = &*theta.design;
    let ev = eval_numerator(
        sample,
        design,
        config,
        kind,
        g,
        &design.propensity.gamma,
        &design.tilt.lambda_s,
        &design.tilt.lambda_a,
        &theta.beta,
        None,
    )?;
    let n = sample.n();
    let n_s = sample.n_study();
    let nf = n as f64;
    let q0 = sample.q0_hat();
    let f = theta.f_y_at_q.value;
    let d_hat = ev.d_hat;
    let point = -d_hat / f;

    let lay = Layout {
        dk: design.k.ncols(),
        dt: design.t.ncols(),
        p: design.model.dim(),
    };
    let links = all_row_links(
        &design.k,
        &design.t,
        &design.propensity.gamma,
        &design.tilt.lambda_s,
        &design.tilt.lambda_a,
        config.propensity_link,
    );
    let mjac = numerator_jacobian(sample, design, kind, g, &ev, &links, lay);
    let (psi_theta, condition) =
        parameter_influence(sample, design, theta, config, &ev, &links, lay)?;

    // Plug-in pieces: smoothing bias and the leading variance of the ratio.
    let fsecond = gaussian_kde_second_derivative(&sample.y, 2.0 * design.b_y, theta.q_hat);
    let mu2 = design.f_y_kde.kernel.int_u2_k();
    let rk = design.f_y_kde.kernel.int_k_squared();
    let bias = design.b_y * design.b_y * fsecond * d_hat * mu2 / (2.0 * f * f);
    let se_plugin = (d_hat * d_hat * rk / (f * f * f * q0 * nf * design.b_y)).sqrt();

    let mut se_improved = None;
    let mut zero_stat = None;
    let mut zero_p = None;
    if let Some(ptheta) = &psi_theta {
        // Numerator influence: parameter part, direct averaging part, and
        // the direction-estimation part.
        let mut psi_d = direction_influence(sample, design, kind, g, &ev);
        for i in 0..n {
            psi_d[i] += row_dot(ptheta, i, &mjac);
        }
        let scale = nf / ev.m_keep as f64;
        for a in 0..ev.rho.len() {
            if ev.keep[a] {
                let h = ev.rho[a] * ev.lam_x[a] * ev.gval[a];
                psi_d[n_s + a] += (h - d_hat) * scale;
            }
        }

        let vd = psi_d.iter().map(|v| v * v).sum::<f64>() / nf;
        if vd.is_finite() {
            if vd > 0.0 {
                let stat = nf.sqrt() * d_hat / vd.sqrt();
                zero_stat = Some(stat);
                zero_p = Some(two_sided_p(stat));
            } else if d_hat == 0.0 {
                zero_stat = Some(0.0);
                zero_p = Some(1.0);
            } else {
                return Err(Error::numerical(
                    "zero-effect test",
                    format!("numerator {d_hat} is nonzero but its influence variance is zero"),
                ));
            }
        }

        // Denominator influence: density estimation at an estimated
        // quantile. The quantile's own influence is the first stacked
        // column.
        let fprime = WeightedKde::new(&sample.y, None, config.y_kernel, 2.0 * design.b_y)
            .expect("study outcomes already validated")
            .derivative(theta.q_hat);
        let mut acc = 0.0;
        let mut finite = true;
        for i in 0..n {
            let mut psi_f = 0.0;
            if sample.r(i) {
                let y = sample.y_at(i).expect("study row");
                let kq =
                    design.f_y_kde.kernel.eval((y - theta.q_hat) / design.b_y) / design.b_y;
                psi_f = (kq - f) / q0;
            }
            psi_f += fprime * ptheta[(i, 0)];
            let psi = (d_hat / (f * f)) * psi_f - psi_d[i] / f;
            if !psi.is_finite() {
                finite = false;
                break;
            }
            acc += psi * psi;
        }
        if finite {
            se_improved = Some((acc / nf / nf).sqrt());
        }
    }

    let se = se_improved.unwrap_or(se_plugin);
    let z = normal_quantile(0.5 + config.ci_level / 2.0);
    // The point estimate is always reported uncorrected; the interval can
    // optionally be recentered by the estimated smoothing bias.
    let center = if config.recenter_bias { point - bias } else { point };
    let dropped = ev.keep.iter().filter(|&&kv| !kv).count();
    Ok(UqeResult {
        kind,
        tau: theta.tau,
        counterfactual: g.label().to_string(),
        q_hat: theta.q_hat,
        f_y_at_q: f,
        d_hat,
        point,
        bias,
        se,
        se_plugin,
        se_improved,
        ci_level: config.ci_level,
        ci_lower: center - z * se,
        ci_upper: center + z * se,
        zero_stat,
        zero_p,
        dropped_rows: dropped,
        jacobian_condition: condition,
        used_plugin_fallback: se_improved.is_none(),
    })
}
