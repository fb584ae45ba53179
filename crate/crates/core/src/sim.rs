//! Synthetic data generation and a simulation oracle.
//!
//! The data-generating process is a linear outcome equation, a linear
//! covariate equation loading on an excluded variable, and a logistic
//! sample-membership rule. The oracle computes effect values without the
//! estimator: it simulates the study population directly, transports the
//! covariate draws along the requested shift, and differentiates the outcome
//! quantile numerically.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::counterfactual::{CounterfactualDistribution, ShiftKind};
use crate::error::{Error, Result};
use crate::link::LinkFunction;
use crate::sample::{AuxSample, StudySample};

/// Parameters of the synthetic design.
///
/// With `z1` and `z2` standard normal, the covariate is
/// `covariate_z1'(1, z1) + covariate_z2'z2 + sigma_x * eta`, the outcome is
/// `outcome_x * x + outcome_z1'(1, z1) + sigma_y * eps`, and membership in
/// the study sample is logistic in `(1, z1, z2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpSpec {
    /// Slope of the covariate of interest in the outcome equation.
    pub outcome_x: f64,
    /// Intercept and `z1` slopes of the outcome equation.
    pub outcome_z1: Vec<f64>,
    pub sigma_y: f64,
    /// Intercept and `z1` slopes of the covariate equation.
    pub covariate_z1: Vec<f64>,
    /// `z2` slopes of the covariate equation; at least one must be nonzero,
    /// otherwise nothing moves the covariate independently of the outcome
    /// controls and the outcome model is not identified.
    pub covariate_z2: Vec<f64>,
    pub sigma_x: f64,
    /// Intercept, `z1`, and `z2` coefficients of the membership propensity.
    pub membership: Vec<f64>,
    /// When set, the covariate is discretized by these strictly increasing
    /// thresholds and recorded as the cell index (0, 1, ...).
    pub x_thresholds: Option<Vec<f64>>,
}

impl Default for DgpSpec {
    fn default() -> Self {
        DgpSpec {
            outcome_x: 0.5,
            outcome_z1: vec![0.5, 0.5],
            sigma_y: 1.0,
            covariate_z1: vec![0.0, 1.0],
            covariate_z2: vec![1.0],
            sigma_x: 1.0,
            membership: vec![-0.4, 0.3, 0.3],
            x_thresholds: None,
        }
    }
}

impl DgpSpec {
    pub fn d1(&self) -> usize {
        self.outcome_z1.len().saturating_sub(1)
    }

    pub fn d2(&self) -> usize {
        self.covariate_z2.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d1 = self.d1();
        if self.outcome_z1.is_empty() || self.covariate_z1.len() != d1 + 1 {
            return Err(Error::validation(format!(
                "outcome_z1 ({}) and covariate_z1 ({}) must both hold an intercept plus the same number of z1 slopes",
                self.outcome_z1.len(),
                self.covariate_z1.len()
            )));
        }
        if self.covariate_z2.is_empty() {
            return Err(Error::validation("covariate_z2 must have at least one slope"));
        }
        if self.covariate_z2.iter().all(|&v| v == 0.0) {
            return Err(Error::validation(
                "covariate_z2 must have a nonzero slope; the excluded variable has to move the covariate",
            ));
        }
        if self.membership.len() != 1 + d1 + self.d2() {
            return Err(Error::validation(format!(
                "membership needs {} coefficients (intercept + z1 + z2), got {}",
                1 + d1 + self.d2(),
                self.membership.len()
            )));
        }
        if !(self.sigma_y > 0.0) || !(self.sigma_x > 0.0) {
            return Err(Error::validation("sigma_x and sigma_y must be positive"));
        }
        if let Some(t) = &self.x_thresholds {
            if t.is_empty() || t.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::validation(
                    "x_thresholds must be nonempty and strictly increasing",
                ));
            }
        }
        Ok(())
    }

    /// Coefficients of the correctly specified probit outcome model with
    /// index `(1, z1, x)` at outcome level `q`, in that term order.
    pub fn implied_beta(&self, q: f64) -> Vec<f64> {
        let mut beta = vec![(q - self.outcome_z1[0]) / self.sigma_y];
        for &g in &self.outcome_z1[1..] {
            beta.push(-g / self.sigma_y);
        }
        beta.push(-self.outcome_x / self.sigma_y);
        beta
    }

    fn discretize(&self, x: f64) -> f64 {
        match &self.x_thresholds {
            None => x,
            Some(t) => t.partition_point(|&b| b <= x) as f64,
        }
    }
}

struct Draw {
    z1: Vec<f64>,
    z2: Vec<f64>,
    x: f64,
    y: f64,
    /// Outcome without its independent noise term.
    ysys: f64,
    study: bool,
}

fn draw_one(spec: &DgpSpec, rng: &mut impl Rng) -> Draw {
    let d1 = spec.d1();
    let d2 = spec.d2();
    let z1: Vec<f64> = (0..d1).map(|_| standard_normal(rng)).collect();
    let z2: Vec<f64> = (0..d2).map(|_| standard_normal(rng)).collect();
    let mut xm = spec.covariate_z1[0];
    for j in 0..d1 {
        xm += spec.covariate_z1[j + 1] * z1[j];
    }
    for j in 0..d2 {
        xm += spec.covariate_z2[j] * z2[j];
    }
    let x = spec.discretize(xm + spec.sigma_x * standard_normal(rng));
    let mut ym = spec.outcome_x * x + spec.outcome_z1[0];
    for j in 0..d1 {
        ym += spec.outcome_z1[j + 1] * z1[j];
    }
    let ysys = ym;
    let y = ym + spec.sigma_y * standard_normal(rng);
    let mut idx = spec.membership[0];
    for j in 0..d1 {
        idx += spec.membership[1 + j] * z1[j];
    }
    for j in 0..d2 {
        idx += spec.membership[1 + d1 + j] * z2[j];
    }
    let p = LinkFunction::Logit.cdf(idx);
    Draw {
        z1,
        z2,
        x,
        y,
        ysys,
        study: rng.gen_bool(p),
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

/// Draw one synthetic data set of `n` total rows, split by membership.
pub fn generate_dgp(
    spec: &DgpSpec,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(StudySample, AuxSample)> {
    spec.validate()?;
    let (d1, d2) = (spec.d1(), spec.d2());
    let mut ys = Vec::new();
    let mut z1s: Vec<f64> = Vec::new();
    let mut z2s: Vec<f64> = Vec::new();
    let mut xa = Vec::new();
    let mut z1a: Vec<f64> = Vec::new();
    let mut z2a: Vec<f64> = Vec::new();
    for _ in 0..n {
        let d = draw_one(spec, rng);
        if d.study {
            ys.push(d.y);
            z1s.extend(d.z1);
            z2s.extend(d.z2);
        } else {
            xa.push(d.x);
            z1a.extend(d.z1);
            z2a.extend(d.z2);
        }
    }
    if ys.is_empty() || xa.is_empty() {
        return Err(Error::numerical(
            "data generation",
            "a simulated sample came out empty; increase n",
        ));
    }
    let study = StudySample::new(
        ys.clone(),
        DMatrix::from_row_slice(ys.len(), d1, &z1s),
        DMatrix::from_row_slice(ys.len(), d2, &z2s),
    );
    let aux = AuxSample::new(
        xa.clone(),
        DMatrix::from_row_slice(xa.len(), d1, &z1a),
        DMatrix::from_row_slice(xa.len(), d2, &z2a),
    );
    Ok((study, aux))
}

/// Options for the simulation oracle.
#[derive(Debug, Clone)]
pub struct OracleOptions {
    /// Study-population draws used for the quantile curves.
    pub draws: usize,
    /// Base step of the numerical derivative.
    pub step: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            draws: 1_000_000,
            step: 0.01,
        }
    }
}

/// Quantile of the transported outcome at shift size `t`.
///
/// `xs` are study-population covariate draws sorted ascending and `ysys` the
/// matching systematic outcome parts (everything except the independent
/// Gaussian noise). Holding the noise law analytic keeps the quantile curves
/// smooth in `t`: the counterfactual outcome CDF is the average of normal
/// CDFs centered at the transported systematic parts, so the sampling noise
/// of the two central-difference endpoints cancels at the root-m rate
/// instead of the local-crossing rate of raw realized draws.
struct OracleState<'a> {
    spec: &'a DgpSpec,
    tau: f64,
    xs: Vec<f64>,
    ysys: Vec<f64>,
}

impl OracleState<'_> {
    fn quantile_at(&self, kind: ShiftKind, g: &CounterfactualDistribution, t: f64) -> f64 {
        let m = self.xs.len();
        let y_t: Vec<f64> = match kind {
            ShiftKind::Mls => self
                .ysys
                .iter()
                .map(|y| y + self.spec.outcome_x * t)
                .collect(),
            ShiftKind::Mqs => (0..m)
                .map(|i| {
                    let u = (i as f64 + 0.5) / m as f64;
                    let dir = g.quantile(u) - self.xs[i];
                    self.ysys[i] + self.spec.outcome_x * t * dir
                })
                .collect(),
            ShiftKind::Mds => {
                let x_t = self.invert_mixture(g, t);
                (0..m)
                    .map(|i| self.ysys[i] + self.spec.outcome_x * (x_t[i] - self.xs[i]))
                    .collect()
            }
        };
        self.smoothed_quantile(&y_t)
    }

    /// Solve `mean_i Phi((q - y_t[i]) / sigma_y) = tau` for `q` by bisection.
    ///
    /// A coarse pass on a subsample brackets the root cheaply; the full data
    /// only enters for the final refinement.
    fn smoothed_quantile(&self, y_t: &[f64]) -> f64 {
        let s = self.spec.sigma_y;
        let m = y_t.len();
        let cdf_of = |vals: &[f64], q: f64| -> f64 {
            let mut acc = 0.0;
            for &v in vals {
                acc += crate::link::normal_cdf((q - v) / s);
            }
            acc / vals.len() as f64 - self.tau
        };
        let bisect = |vals: &[f64], mut lo: f64, mut hi: f64, iters: usize| -> f64 {
            for _ in 0..iters {
                let mid = 0.5 * (lo + hi);
                if cdf_of(vals, mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-12 * (1.0 + mid.abs()) {
                    break;
                }
            }
            0.5 * (lo + hi)
        };

        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in y_t {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let (lo, hi) = (lo - 9.0 * s, hi + 9.0 * s);
        if m <= 50_000 {
            return bisect(y_t, lo, hi, 80);
        }
        let stride = m.div_ceil(40_000);
        let sub: Vec<f64> = y_t.iter().copied().step_by(stride).collect();
        let q0 = bisect(&sub, lo, hi, 60);
        // Newton refinement on the full data; the mixture CDF is smooth with
        // density bounded away from zero near the root, so a handful of
        // passes reaches rounding precision from the subsample start.
        let mut q = q0;
        for _ in 0..12 {
            let mut c = 0.0;
            let mut d = 0.0;
            for &v in y_t {
                let z = (q - v) / s;
                c += crate::link::normal_cdf(z);
                d += crate::link::normal_pdf(z);
            }
            let c = c / m as f64 - self.tau;
            let d = d / (m as f64 * s);
            if !(d > 1e-12) || (q - q0).abs() > 1.0 + s {
                return bisect(y_t, lo, hi, 80);
            }
            let step = c / d;
            q -= step;
            if step.abs() <= 1e-12 * (1.0 + q.abs()) {
                return q;
            }
        }
        q
    }

    /// Transport sorted draws through `(1-t) F + t G` by inverting the mixed
    /// CDF on a fine grid; `F` is the empirical CDF of the draws themselves.
    fn invert_mixture(&self, g: &CounterfactualDistribution, t: f64) -> Vec<f64> {
        let m = self.xs.len();
        let (g_lo, g_hi) = g.support();
        let lo = self.xs[0].min(if g_lo.is_finite() { g_lo } else { g.quantile(1e-9) });
        let hi = self.xs[m - 1].max(if g_hi.is_finite() { g_hi } else { g.quantile(1.0 - 1e-9) });
        let steps = 8000usize;
        let width = (hi - lo).max(f64::MIN_POSITIVE);
        // Mixed CDF on the grid, forced monotone so tiny negative-mixture
        // wiggles (possible when extrapolating with t < 0) cannot break the
        // sweep.
        let mut grid = Vec::with_capacity(steps + 1);
        let mut cdf = Vec::with_capacity(steps + 1);
        let mut ptr = 0usize;
        let mut running = 0.0f64;
        for s in 0..=steps {
            // Recomputing `hi` through the affine map can land one ulp low,
            // which would leave the top draw without a bracketing cell.
            let x = if s == steps {
                hi
            } else {
                lo + width * s as f64 / steps as f64
            };
            while ptr < m && self.xs[ptr] <= x {
                ptr += 1;
            }
            let f_emp = ptr as f64 / m as f64;
            let v = f_emp + t * (g.cdf(x) - f_emp);
            running = running.max(v);
            grid.push(x);
            cdf.push(running);
        }
        let mut out = Vec::with_capacity(m);
        let mut gp = 0usize;
        for i in 0..m {
            let u = (i as f64 + 0.5) / m as f64;
            while gp + 1 < steps && cdf[gp + 1] < u {
                gp += 1;
            }
            let (c0, c1) = (cdf[gp], cdf[gp + 1]);
            let x = if c1 > c0 {
                grid[gp] + (grid[gp + 1] - grid[gp]) * ((u - c0) / (c1 - c0)).clamp(0.0, 1.0)
            } else {
                grid[gp]
            };
            out.push(x);
        }
        out
    }
}

/// Effect value by direct simulation of the study population.
///
/// Rejection-samples draws conditional on study membership, shifts the
/// covariate by `t` along the requested kind, and returns the Richardson
/// extrapolation of the central difference quotient of the outcome quantile.
pub fn oracle_uqe(
    spec: &DgpSpec,
    kind: ShiftKind,
    tau: f64,
    g: &CounterfactualDistribution,
    opts: &OracleOptions,
    rng: &mut impl Rng,
) -> Result<f64> {
    spec.validate()?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::validation(format!(
            "quantile level must lie in (0,1), got {tau}"
        )));
    }
    let m = opts.draws;
    let mut xs = Vec::with_capacity(m);
    let mut ys = Vec::with_capacity(m);
    let mut attempts = 0usize;
    while xs.len() < m {
        attempts += 1;
        if attempts > 200 * m {
            return Err(Error::numerical(
                "oracle",
                "rejection sampling almost never hits the study population",
            ));
        }
        let d = draw_one(spec, rng);
        if d.study {
            xs.push(d.x);
            ys.push(d.ysys);
        }
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let state = OracleState {
        spec,
        tau,
        xs: idx.iter().map(|&i| xs[i]).collect(),
        ysys: idx.iter().map(|&i| ys[i]).collect(),
    };

    let diff = |t: f64| {
        (state.quantile_at(kind, g, t) - state.quantile_at(kind, g, -t)) / (2.0 * t)
    };
    let d1 = diff(opts.step);
    let d2 = diff(opts.step / 2.0);
    Ok((4.0 * d2 - d1) / 3.0)
}

/// Monte Carlo harness settings.
#[derive(Debug, Clone)]
pub struct McOptions {
    /// Rows per replication (before the study/auxiliary split).
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub oracle: OracleOptions,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            n: 5_000,
            reps: 200,
            seed: 1,
            oracle: OracleOptions::default(),
        }
    }
}

/// One replication's estimate, judged against the oracle value.
#[derive(Debug, Clone, Serialize)]
pub struct McReplication {
    pub rep: usize,
    pub point: f64,
    /// Numerator of the effect, kept for rate diagnostics.
    pub d_hat: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub zero_p: Option<f64>,
    pub covered: bool,
    pub rejected: bool,
}

/// Aggregated Monte Carlo results.
#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub kind: ShiftKind,
    pub tau: f64,
    pub n: usize,
    pub requested_reps: usize,
    pub completed_reps: usize,
    pub failed_reps: usize,
    pub first_failure: Option<String>,
    /// Effect value from the simulation oracle.
    pub oracle: f64,
    pub mean_point: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub mean_se: f64,
    /// Share of replications whose interval covers the oracle value.
    pub coverage: f64,
    /// Share of replications rejecting the zero-effect null at level
    /// `1 - ci_level`.
    pub rejection_rate: f64,
    pub replications: Vec<McReplication>,
    #[serde(skip)]
    pub runtime: std::time::Duration,
}

/// Repeated estimation on freshly simulated data, judged against the oracle.
///
/// Each replication draws its own data set from a per-replication RNG stream,
/// so the report is identical for a given seed no matter how the work is
/// scheduled across threads. Replications that fail are counted, not fatal;
/// the run errors only when nothing completes.
pub fn run_monte_carlo(
    spec: &DgpSpec,
    config: &crate::config::EstimatorConfig,
    kind: ShiftKind,
    tau: f64,
    g: &CounterfactualDistribution,
    opts: &McOptions,
) -> Result<McReport> {
    use rand::SeedableRng;
    use rayon::prelude::*;

    spec.validate()?;
    config.validate()?;
    if opts.reps == 0 {
        return Err(Error::validation("monte carlo needs at least 1 replication"));
    }
    let started = std::time::Instant::now();

    // Stream 0 is reserved for the oracle; replication r uses stream r.
    let mut oracle_rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    oracle_rng.set_stream(0);
    let oracle = oracle_uqe(spec, kind, tau, g, &opts.oracle, &mut oracle_rng)?;
    let alpha = 1.0 - config.ci_level;

    let runs: Vec<std::result::Result<McReplication, String>> = (1..=opts.reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(rep as u64);
            let mut run = || -> Result<McReplication> {
                let (study, aux) = generate_dgp(spec, opts.n, &mut rng)?;
                let sample = crate::sample::merge_samples(&study, &aux)?;
                let theta = crate::estimator::fit_theta(&sample, config, tau)?;
                let r = crate::uqe::estimate_uqe(&sample, &theta, kind, g, config)?;
                Ok(McReplication {
                    rep,
                    point: r.point,
                    d_hat: r.d_hat,
                    se: r.se,
                    ci_lower: r.ci_lower,
                    ci_upper: r.ci_upper,
                    zero_p: r.zero_p,
                    covered: r.ci_lower <= oracle && oracle <= r.ci_upper,
                    rejected: r.zero_p.map_or(false, |p| p < alpha),
                })
            };
            run().map_err(|e| e.to_string())
        })
        .collect();

    let mut replications = Vec::new();
    let mut failed = 0usize;
    let mut first_failure = None;
    for r in runs {
        match r {
            Ok(rep) => replications.push(rep),
            Err(msg) => {
                failed += 1;
                first_failure.get_or_insert(msg);
            }
        }
    }
    let c = replications.len();
    if c == 0 {
        return Err(Error::numerical(
            "monte carlo",
            format!(
                "every replication failed; first failure: {}",
                first_failure.unwrap_or_default()
            ),
        ));
    }
    let cf = c as f64;
    let mean_point = replications.iter().map(|r| r.point).sum::<f64>() / cf;
    let bias = mean_point - oracle;
    let var = replications
        .iter()
        .map(|r| (r.point - mean_point) * (r.point - mean_point))
        .sum::<f64>()
        / (cf - 1.0).max(1.0);
    let rmse = (replications
        .iter()
        .map(|r| (r.point - oracle) * (r.point - oracle))
        .sum::<f64>()
        / cf)
        .sqrt();
    let mean_se = replications.iter().map(|r| r.se).sum::<f64>() / cf;
    let coverage = replications.iter().filter(|r| r.covered).count() as f64 / cf;
    let rejection_rate = replications.iter().filter(|r| r.rejected).count() as f64 / cf;

    Ok(McReport {
        kind,
        tau,
        n: opts.n,
        requested_reps: opts.reps,
        completed_reps: c,
        failed_reps: failed,
        first_failure,
        oracle,
        mean_point,
        bias,
        sd: var.sqrt(),
        rmse,
        mean_se,
        coverage,
        rejection_rate,
        replications,
        runtime: started.elapsed(),
    })
}
