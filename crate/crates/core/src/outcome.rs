//! Conditional outcome model linking the two samples.
//!
//! Only study rows carry the outcome and only auxiliary rows carry the
//! covariate of interest, so the probability of falling at or below a given
//! outcome level is modeled parametrically as `L(phi(X, Z1)' beta)` with a
//! known link `L`. The coefficients are fitted by GMM: reweighted study
//! indicators must match reweighted model probabilities in every instrument
//! direction.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::link::LinkFunction;
use crate::sample::MergedSample;

/// One term of the outcome model index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IndexTerm {
    Intercept,
    /// Power of one `z1` column (by column position).
    Z1 { col: usize, pow: u32 },
    /// Power of the covariate of interest.
    XPow(u32),
    /// Interaction of the covariate with one `z1` column.
    XZ1 { col: usize },
}

impl IndexTerm {
    /// Term value and its derivative in the covariate.
    fn value_and_dx(&self, x: f64, z1: impl Fn(usize) -> f64) -> (f64, f64) {
        match *self {
            IndexTerm::Intercept => (1.0, 0.0),
            IndexTerm::Z1 { col, pow } => (z1(col).powi(pow as i32), 0.0),
            IndexTerm::XPow(pow) => (
                x.powi(pow as i32),
                pow as f64 * x.powi(pow as i32 - 1),
            ),
            IndexTerm::XZ1 { col } => (x * z1(col), z1(col)),
        }
    }
}

fn parse_term(raw: &str, z1_names: &[String]) -> Result<IndexTerm> {
    let s = raw.trim();
    if s == "1" {
        return Ok(IndexTerm::Intercept);
    }
    if let Some((a, b)) = s.split_once('*') {
        let (a, b) = (a.trim(), b.trim());
        let name = if a == "x" {
            b
        } else if b == "x" {
            a
        } else {
            return Err(Error::validation(format!(
                "interaction term {s:?} must multiply \"x\" with a z1 column"
            )));
        };
        let col = z1_names.iter().position(|n| n == name).ok_or_else(|| {
            Error::validation(format!(
                "interaction term {s:?} references unknown z1 column {name:?}; available: {z1_names:?}"
            ))
        })?;
        return Ok(IndexTerm::XZ1 { col });
    }
    let (base, pow) = match s.split_once('^') {
        Some((b, p)) => {
            let pow: u32 = p.trim().parse().map_err(|_| {
                Error::validation(format!("bad exponent in outcome index term {s:?}"))
            })?;
            (b.trim(), pow)
        }
        None => (s, 1),
    };
    if pow == 0 {
        return Err(Error::validation(format!(
            "outcome index term {s:?} has exponent 0; use \"1\" for the intercept"
        )));
    }
    if base == "x" {
        return Ok(IndexTerm::XPow(pow));
    }
    if let Some(col) = z1_names.iter().position(|n| n == base) {
        return Ok(IndexTerm::Z1 { col, pow });
    }
    Err(Error::validation(format!(
        "unknown outcome index term {s:?}; use \"1\", \"x\", \"x^p\", \"x*<z1 column>\", \
         or a z1 column name (available: {z1_names:?})"
    )))
}

/// Parametric model for `P(outcome <= level | X, Z1)`.
#[derive(Debug, Clone)]
pub struct LambdaModel {
    pub link: LinkFunction,
    pub terms: Vec<IndexTerm>,
    pub labels: Vec<String>,
}

/// Pointwise model evaluation with the derivatives the estimator needs.
#[derive(Debug, Clone)]
pub struct LambdaEval {
    /// Model probability.
    pub value: f64,
    /// Derivative in the covariate.
    pub dx: f64,
    /// Gradient in the coefficients.
    pub dbeta: DVector<f64>,
    /// Gradient of `dx` in the coefficients.
    pub dx_dbeta: DVector<f64>,
}

impl LambdaModel {
    /// Parse term labels against the sample's `z1` column names.
    pub fn parse(link: LinkFunction, terms: &[String], z1_names: &[String]) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::validation("outcome index needs at least one term"));
        }
        let mut parsed = Vec::with_capacity(terms.len());
        for raw in terms {
            let term = parse_term(raw, z1_names)?;
            if parsed.contains(&term) {
                return Err(Error::validation(format!(
                    "outcome index term {raw:?} appears more than once"
                )));
            }
            parsed.push(term);
        }
        // An index without any x term is allowed: the model is then free of
        // the covariate of interest, its x-derivative vanishes identically,
        // and every downstream effect is exactly zero.
        Ok(LambdaModel {
            link,
            terms: parsed,
            labels: terms.iter().map(|s| s.trim().to_string()).collect(),
        })
    }

    /// Default index: intercept, every `z1` column, then `x` and `x^2`.
    pub fn default_terms(z1_names: &[String]) -> Vec<String> {
        let mut terms = vec!["1".to_string()];
        terms.extend(z1_names.iter().cloned());
        terms.push("x".to_string());
        terms.push("x^2".to_string());
        terms
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    /// Feature vector and its derivative in the covariate.
    pub fn features(&self, x: f64, z1: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let p = self.terms.len();
        let mut phi = DVector::zeros(p);
        let mut phi_x = DVector::zeros(p);
        for (j, term) in self.terms.iter().enumerate() {
            let (v, dv) = term.value_and_dx(x, |c| z1[c]);
            phi[j] = v;
            phi_x[j] = dv;
        }
        (phi, phi_x)
    }

    /// Model probability and derivatives at one point.
    pub fn eval(&self, beta: &DVector<f64>, x: f64, z1: &[f64]) -> LambdaEval {
        let (phi, phi_x) = self.features(x, z1);
        let m = phi.dot(beta);
        let s = phi_x.dot(beta);
        let l1 = self.link.pdf(m);
        let l2 = self.link.pdf_prime(m);
        LambdaEval {
            value: self.link.cdf(m),
            dx: l1 * s,
            dbeta: l1 * &phi,
            dx_dbeta: l2 * s * &phi + l1 * &phi_x,
        }
    }

    /// Feature matrices over the auxiliary rows (auxiliary order).
    pub fn aux_features(&self, sample: &MergedSample) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let d1 = sample.d1();
        for term in &self.terms {
            let col = match *term {
                IndexTerm::Z1 { col, .. } | IndexTerm::XZ1 { col } => col,
                _ => continue,
            };
            if col >= d1 {
                return Err(Error::validation(format!(
                    "outcome index references z1 column {col} but the sample has {d1}"
                )));
            }
        }
        let n_a = sample.n_aux();
        let p = self.terms.len();
        let mut phi = DMatrix::zeros(n_a, p);
        let mut phi_x = DMatrix::zeros(n_a, p);
        for (a, i) in sample.aux_rows().enumerate() {
            let x = sample.x_at(i).expect("auxiliary row");
            for (j, term) in self.terms.iter().enumerate() {
                let (v, dv) = term.value_and_dx(x, |c| sample.z1[(i, c)]);
                phi[(a, j)] = v;
                phi_x[(a, j)] = dv;
            }
        }
        Ok((phi, phi_x))
    }
}

/// Per-row moment contributions at given coefficients.
///
/// Row `i` is `(pi_s_i r_i 1(y_i <= q) - pi_a_i (1-r_i) L_i(beta)) e_i`.
/// Study rows do not depend on `beta`; auxiliary rows do not depend on the
/// outcome.
pub fn moment_rows(
    sample: &MergedSample,
    e: &DMatrix<f64>,
    pi_s: &[f64],
    pi_a: &[f64],
    q_hat: f64,
    model: &LambdaModel,
    beta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = sample.n();
    if e.nrows() != n || pi_s.len() != n || pi_a.len() != n {
        return Err(Error::validation(
            "moment inputs must cover every row of the merged sample",
        ));
    }
    let (phi, _) = model.aux_features(sample)?;
    let de = e.ncols();
    let mut out = DMatrix::zeros(n, de);
    for i in 0..sample.n_study() {
        let hit = if sample.y_at(i).expect("study row") <= q_hat {
            1.0
        } else {
            0.0
        };
        let a = pi_s[i] * hit;
        for j in 0..de {
            out[(i, j)] = a * e[(i, j)];
        }
    }
    for (ai, i) in sample.aux_rows().enumerate() {
        let m: f64 = (0..model.dim()).map(|j| phi[(ai, j)] * beta[j]).sum();
        let a = -pi_a[i] * model.link.cdf(m);
        for j in 0..de {
            out[(i, j)] = a * e[(i, j)];
        }
    }
    Ok(out)
}

/// Options for the GMM coefficient fit.
#[derive(Debug, Clone)]
pub struct GmmOptions {
    /// Re-minimize with the inverse moment covariance after a first pass.
    pub two_step: bool,
    pub max_iter: usize,
    /// Convergence tolerance on the relative Newton step (sup norm). The
    /// step is invariant to rescaling the instruments, so this criterion is
    /// too.
    pub step_tol: f64,
    /// Total number of starts tried when the first one fails or lands on a
    /// weakly identified point.
    pub starts: usize,
    /// Seed for the deterministic jitter applied to restart points.
    pub jitter_seed: u64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            two_step: false,
            max_iter: 200,
            step_tol: 1e-10,
            starts: 5,
            jitter_seed: 0x9e3779b97f4a7c15,
        }
    }
}

/// Fitted outcome coefficients with the pieces later stages reuse.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub beta: DVector<f64>,
    /// Weighted quadratic form of the mean moments at the solution.
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    /// Index of the start that produced the solution (0 = default start).
    pub start_used: usize,
    /// Mean moment Jacobian at the solution (instruments by coefficients).
    pub jacobian: DMatrix<f64>,
    /// Weight matrix used in the final minimization.
    pub weight: DMatrix<f64>,
    /// Smallest singular value of the Jacobian, relative to the largest.
    pub relative_rank_gap: f64,
    /// Set when the Jacobian is numerically rank deficient at the solution.
    pub weakly_identified: bool,
}

struct GmmProblem<'a> {
    e: &'a DMatrix<f64>,
    n: usize,
    n_study: usize,
    pi_a: &'a [f64],
    phi: DMatrix<f64>,
    link: LinkFunction,
    /// Study-side component of the moment sum (not yet divided by `n`).
    c: DVector<f64>,
}

impl<'a> GmmProblem<'a> {
    /// Mean moments and their Jacobian in the coefficients.
    fn moments(&self, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let de = self.e.ncols();
        let p = self.phi.ncols();
        let mut g = self.c.clone();
        let mut jac = DMatrix::zeros(de, p);
        for ai in 0..self.phi.nrows() {
            let i = self.n_study + ai;
            let m: f64 = (0..p).map(|j| self.phi[(ai, j)] * beta[j]).sum();
            let w = self.pi_a[i];
            let l = self.link.cdf(m);
            let l1 = self.link.pdf(m);
            for a in 0..de {
                let ea = self.e[(i, a)];
                g[a] -= w * l * ea;
                for b in 0..p {
                    jac[(a, b)] -= w * l1 * ea * self.phi[(ai, b)];
                }
            }
        }
        (g / self.n as f64, jac / self.n as f64)
    }
}

fn quad(omega: &DMatrix<f64>, g: &DVector<f64>) -> f64 {
    (omega * g).dot(g)
}

fn relative_rank_gap(jac: &DMatrix<f64>) -> f64 {
    let sv = jac.clone().singular_values();
    let max = sv.max();
    if max <= 0.0 {
        0.0
    } else {
        sv.min() / max
    }
}

fn newton_from(
    problem: &GmmProblem,
    omega: &DMatrix<f64>,
    start: &DVector<f64>,
    options: &GmmOptions,
) -> Result<(DVector<f64>, f64, f64, usize)> {
    let mut beta = start.clone();
    let (mut g, mut jac) = problem.moments(&beta);
    let mut obj = quad(omega, &g);
    for iter in 0..=options.max_iter {
        let grad = jac.transpose() * (omega * &g) * 2.0;
        let grad_norm = grad.amax();
        if grad_norm == 0.0 {
            return Ok((beta, obj, grad_norm, iter));
        }
        // Gauss-Newton direction; the SVD solve tolerates a rank-deficient
        // Jacobian by returning the minimum-norm step.
        let lhs = jac.transpose() * omega * &jac;
        let rhs = -(jac.transpose() * (omega * &g));
        let svd = lhs.svd(true, true);
        let rank_eps = 1e-13 * svd.singular_values.max().max(f64::MIN_POSITIVE);
        let step = svd
            .solve(&rhs, rank_eps)
            .map_err(|m| Error::numerical("outcome model", m.to_string()))?;
        if step.amax() <= options.step_tol * (1.0 + beta.amax()) {
            return Ok((beta, obj, grad_norm, iter));
        }
        let slope = grad.dot(&step);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + scale * &step;
            let (cg, cjac) = problem.moments(&cand);
            let cobj = quad(omega, &cg);
            if cobj <= obj + 1e-4 * scale * slope || cobj < obj * (1.0 - 1e-12) {
                beta = cand;
                g = cg;
                jac = cjac;
                obj = cobj;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::numerical(
                "outcome model",
                format!("line search stalled with gradient {grad_norm:.3e}"),
            ));
        }
    }
    Err(Error::numerical(
        "outcome model",
        "coefficient fit did not converge",
    ))
}

fn minimize(
    problem: &GmmProblem,
    omega: &DMatrix<f64>,
    start: &DVector<f64>,
    options: &GmmOptions,
) -> Result<(DVector<f64>, f64, f64, usize, usize)> {
    let p = problem.phi.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(options.jitter_seed);
    let mut best: Option<(DVector<f64>, f64, f64, usize, usize)> = None;
    let mut last_err = None;
    for s in 0..options.starts.max(1) {
        let b0 = if s == 0 {
            start.clone()
        } else {
            DVector::from_fn(p, |j, _| start[j] + rng.gen_range(-1.0..1.0))
        };
        match newton_from(problem, omega, &b0, options) {
            Ok((beta, obj, grad, iters)) => {
                let gap = relative_rank_gap(&problem.moments(&beta).1);
                let solid = gap > 1e-8;
                let better = match &best {
                    None => true,
                    Some((_, bobj, ..)) => obj < *bobj,
                };
                if better {
                    best = Some((beta, obj, grad, iters, s));
                }
                // A well-identified converged fit needs no further starts.
                if solid {
                    break;
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some(found) => Ok(found),
        None => Err(last_err
            .unwrap_or_else(|| Error::numerical("outcome model", "no start converged"))),
    }
}

/// Fit the outcome model coefficients by GMM.
///
/// `e` holds one instrument row per merged-sample row; `pi_s` and `pi_a` are
/// the tilt weights. The instrument count must reach the coefficient count,
/// otherwise the model is not identified and the fit refuses to run.
pub fn fit_beta(
    sample: &MergedSample,
    e: &DMatrix<f64>,
    pi_s: &[f64],
    pi_a: &[f64],
    q_hat: f64,
    model: &LambdaModel,
    start: Option<&DVector<f64>>,
    options: &GmmOptions,
) -> Result<GmmFit> {
    let n = sample.n();
    let de = e.ncols();
    let p = model.dim();
    if e.nrows() != n || pi_s.len() != n || pi_a.len() != n {
        return Err(Error::validation(
            "moment inputs must cover every row of the merged sample",
        ));
    }
    if de < p {
        return Err(Error::validation(format!(
            "order condition failed: {de} moment instruments for {p} outcome coefficients; \
             enlarge the moment basis"
        )));
    }

    let (phi, _) = model.aux_features(sample)?;
    let mut c = DVector::zeros(de);
    for i in 0..sample.n_study() {
        if sample.y_at(i).expect("study row") <= q_hat {
            for j in 0..de {
                c[j] += pi_s[i] * e[(i, j)];
            }
        }
    }
    let problem = GmmProblem {
        e,
        n,
        n_study: sample.n_study(),
        pi_a,
        phi,
        link: model.link,
        c,
    };

    let zero = DVector::zeros(p);
    let start = start.cloned().unwrap_or(zero);
    let identity = DMatrix::identity(de, de);
    let (mut beta, mut obj, mut grad, mut iters, start_used) =
        minimize(&problem, &identity, &start, options)?;
    let mut weight = identity;

    if options.two_step {
        let rows = moment_rows(sample, e, pi_s, pi_a, q_hat, model, &beta)?;
        let mut s = DMatrix::zeros(de, de);
        for i in 0..n {
            for a in 0..de {
                for b in 0..de {
                    s[(a, b)] += rows[(i, a)] * rows[(i, b)];
                }
            }
        }
        s /= n as f64;
        let omega = s
            .clone()
            .svd(true, true)
            .pseudo_inverse(1e-12)
            .map_err(|m| Error::numerical("outcome model", m.to_string()))?;
        let refit = minimize(&problem, &omega, &beta, options)?;
        beta = refit.0;
        obj = refit.1;
        grad = refit.2;
        iters = refit.3;
        weight = omega;
    }

    let (_, jac) = problem.moments(&beta);
    let gap = relative_rank_gap(&jac);
    Ok(GmmFit {
        beta,
        objective: obj,
        gradient_norm: grad,
        iterations: iters,
        start_used,
        jacobian: jac,
        weight,
        relative_rank_gap: gap,
        weakly_identified: gap <= 1e-8,
    })
}
