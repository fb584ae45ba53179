//! Counterfactual target distributions and shift directions.
//!
//! A counterfactual distribution `G` describes where the covariate of
//! interest is pushed. Together with the status-quo distribution `F` of that
//! covariate in the study population it induces a direction function `g(x)`:
//! how far mass at `x` moves per unit of shift, under a location shift
//! (constant direction), a quantile shift (`G^{-1}(F(x)) - x`), or a
//! distribution shift (`-(G(x) - F(x)) / f(x)`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::{normal_cdf, normal_pdf, normal_quantile};
use crate::nonparam::WeightedKde;

/// Which marginal shift of the covariate distribution is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftKind {
    /// Location shift: every quantile moves by the same amount.
    Mls,
    /// Quantile shift: quantiles move toward those of `G`.
    Mqs,
    /// Distribution shift: the CDF is mixed toward `G`.
    Mds,
}

impl std::fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ShiftKind::Mls => "mls",
            ShiftKind::Mqs => "mqs",
            ShiftKind::Mds => "mds",
        };
        f.write_str(s)
    }
}

/// Strictly increasing piecewise-linear CDF.
///
/// Knot probabilities follow the interpolation convention whose inverse is
/// the linearly interpolated sample quantile: for `m` distinct equally
/// weighted points the knot at the `j`-th order statistic carries
/// probability `(j-1)/(m-1)`, generalized to weights as the left cumulative
/// weight rescaled so the last knot carries exactly one. Duplicated values
/// collapse to a single knot holding their combined mass.
#[derive(Debug, Clone)]
struct PiecewiseCdf {
    xs: Vec<f64>,
    ps: Vec<f64>,
}

impl PiecewiseCdf {
    fn from_weighted(data: &[f64], weights: Option<&[f64]>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::validation("counterfactual sample is empty"));
        }
        if let Some(w) = weights {
            if w.len() != data.len() {
                return Err(Error::validation("counterfactual weight length mismatch"));
            }
            if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::validation("counterfactual weights must be positive"));
            }
        }
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.sort_by(|&a, &b| data[a].total_cmp(&data[b]));
        let total: f64 = match weights {
            Some(w) => w.iter().sum(),
            None => data.len() as f64,
        };
        let wt = |i: usize| weights.map_or(1.0, |w| w[i]) / total;

        // Left-cumulative plotting positions, rescaled by 1 - (weight of the
        // top row) so the final knot reaches exactly one.
        let last_w = wt(*idx.last().unwrap());
        let denom = 1.0 - last_w;
        let mut xs: Vec<f64> = Vec::new();
        let mut ps: Vec<f64> = Vec::new();
        let mut left = 0.0;
        for &i in &idx {
            let p = if denom > 0.0 { (left / denom).min(1.0) } else { 1.0 };
            let x = data[i];
            if let Some(last) = xs.last() {
                if *last == x {
                    *ps.last_mut().unwrap() = p;
                    left += wt(i);
                    continue;
                }
            }
            xs.push(x);
            ps.push(p);
            left += wt(i);
        }
        *ps.last_mut().unwrap() = 1.0;
        Ok(PiecewiseCdf { xs, ps })
    }

    fn from_table(xs: Vec<f64>, ps: Vec<f64>) -> Result<Self> {
        if xs.len() != ps.len() || xs.len() < 2 {
            return Err(Error::validation(
                "quantile table needs matching u/x columns with at least 2 rows",
            ));
        }
        if ps[0] != 0.0 || *ps.last().unwrap() != 1.0 {
            return Err(Error::validation(
                "quantile table must start at u=0 and end at u=1",
            ));
        }
        for w in xs.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::validation("quantile table x values must be strictly increasing"));
            }
        }
        for w in ps.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::validation("quantile table u values must be strictly increasing"));
            }
        }
        Ok(PiecewiseCdf { xs, ps })
    }

    fn cdf(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x < self.xs[0] {
            return 0.0;
        }
        if x >= self.xs[n - 1] {
            return 1.0;
        }
        // partition_point gives the first knot strictly above x.
        let j = self.xs.partition_point(|&v| v <= x);
        if self.xs[j - 1] == x {
            return self.ps[j - 1];
        }
        let (x0, x1) = (self.xs[j - 1], self.xs[j]);
        let (p0, p1) = (self.ps[j - 1], self.ps[j]);
        p0 + (p1 - p0) * (x - x0) / (x1 - x0)
    }

    fn quantile(&self, u: f64) -> f64 {
        let n = self.xs.len();
        if u <= self.ps[0] {
            return self.xs[0];
        }
        if u >= 1.0 {
            return self.xs[n - 1];
        }
        let j = self.ps.partition_point(|&p| p < u);
        if self.ps[j] == u {
            return self.xs[j];
        }
        let (p0, p1) = (self.ps[j - 1], self.ps[j]);
        let (x0, x1) = (self.xs[j - 1], self.xs[j]);
        x0 + (x1 - x0) * (u - p0) / (p1 - p0)
    }

    fn pdf(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x < self.xs[0] || x > self.xs[n - 1] || n < 2 {
            return 0.0;
        }
        let j = self.xs.partition_point(|&v| v <= x).clamp(1, n - 1);
        (self.ps[j] - self.ps[j - 1]) / (self.xs[j] - self.xs[j - 1])
    }
}

#[derive(Debug, Clone)]
enum Repr {
    Piecewise(PiecewiseCdf),
    Normal { mu: f64, sigma: f64 },
    Uniform { a: f64, b: f64 },
}

/// A counterfactual (or status-quo) distribution as a coherent
/// cdf / pdf / quantile triple.
#[derive(Debug, Clone)]
pub struct CounterfactualDistribution {
    repr: Repr,
    label: String,
}

impl CounterfactualDistribution {
    /// Interpolated CDF of a (possibly weighted) donor sample.
    pub fn from_sample(data: &[f64], weights: Option<&[f64]>) -> Result<Self> {
        Ok(CounterfactualDistribution {
            repr: Repr::Piecewise(PiecewiseCdf::from_weighted(data, weights)?),
            label: format!("sample[{}]", data.len()),
        })
    }

    /// Piecewise-linear distribution given as a (u, x) quantile table.
    /// The table must cover u=0 to u=1.
    pub fn from_quantile_table(us: &[f64], xs: &[f64]) -> Result<Self> {
        Ok(CounterfactualDistribution {
            repr: Repr::Piecewise(PiecewiseCdf::from_table(xs.to_vec(), us.to_vec())?),
            label: format!("table[{}]", us.len()),
        })
    }

    pub fn normal(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
            return Err(Error::validation(format!(
                "normal counterfactual needs finite mu and sigma > 0, got ({mu}, {sigma})"
            )));
        }
        Ok(CounterfactualDistribution {
            repr: Repr::Normal { mu, sigma },
            label: format!("normal({mu},{sigma})"),
        })
    }

    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        if !(b > a) || !a.is_finite() || !b.is_finite() {
            return Err(Error::validation(format!(
                "uniform counterfactual needs a < b, got ({a}, {b})"
            )));
        }
        Ok(CounterfactualDistribution {
            repr: Repr::Uniform { a, b },
            label: format!("uniform({a},{b})"),
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Piecewise(p) => p.cdf(x),
            Repr::Normal { mu, sigma } => normal_cdf((x - mu) / sigma),
            Repr::Uniform { a, b } => ((x - a) / (b - a)).clamp(0.0, 1.0),
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match &self.repr {
            Repr::Piecewise(p) => p.pdf(x),
            Repr::Normal { mu, sigma } => normal_pdf((x - mu) / sigma) / sigma,
            Repr::Uniform { a, b } => {
                if x >= *a && x <= *b {
                    1.0 / (b - a)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        match &self.repr {
            Repr::Piecewise(p) => p.quantile(u),
            Repr::Normal { mu, sigma } => {
                let u = u.clamp(1e-12, 1.0 - 1e-12);
                mu + sigma * normal_quantile(u)
            }
            Repr::Uniform { a, b } => a + (b - a) * u.clamp(0.0, 1.0),
        }
    }

    /// Support endpoints; unbounded tails are infinite.
    pub fn support(&self) -> (f64, f64) {
        match &self.repr {
            Repr::Piecewise(p) => (p.xs[0], *p.xs.last().unwrap()),
            Repr::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Repr::Uniform { a, b } => (*a, *b),
        }
    }

    /// Translate the distribution to the right by `c`.
    pub fn shifted(&self, c: f64) -> Self {
        let repr = match &self.repr {
            Repr::Piecewise(p) => Repr::Piecewise(PiecewiseCdf {
                xs: p.xs.iter().map(|x| x + c).collect(),
                ps: p.ps.clone(),
            }),
            Repr::Normal { mu, sigma } => Repr::Normal {
                mu: mu + c,
                sigma: *sigma,
            },
            Repr::Uniform { a, b } => Repr::Uniform { a: a + c, b: b + c },
        };
        CounterfactualDistribution {
            repr,
            label: format!("{}+{}", self.label, c),
        }
    }

    /// Check that a bounded counterfactual support stays inside the observed
    /// covariate range; unbounded supports are accepted (the observed range
    /// is only a proxy for the true support) and left to diagnostics.
    pub fn check_support_within(&self, lo: f64, hi: f64) -> Result<()> {
        let (a, b) = self.support();
        let slack = 1e-9 * (hi - lo).max(1.0);
        if a.is_finite() && b.is_finite() && (a < lo - slack || b > hi + slack) {
            return Err(Error::validation(format!(
                "counterfactual {} has support [{a}, {b}] outside the observed covariate range [{lo}, {hi}]",
                self.label
            )));
        }
        Ok(())
    }
}

/// Direction of motion at `x` for the given shift kind.
///
/// `f_status_quo` is the estimated covariate distribution in the study
/// population; `f_x` its kernel density estimate, needed only for the
/// distribution shift. Returns `Ok(None)` when the point is excluded by
/// boundary trimming or the density floor (distribution shift only); the
/// caller is responsible for dropping such points from averages.
pub fn shift_direction(
    kind: ShiftKind,
    g: &CounterfactualDistribution,
    f_status_quo: &CounterfactualDistribution,
    f_x: Option<&WeightedKde>,
    density_floor: f64,
    x: f64,
) -> Result<Option<f64>> {
    match kind {
        ShiftKind::Mls => Ok(Some(1.0)),
        ShiftKind::Mqs => Ok(Some(g.quantile(f_status_quo.cdf(x)) - x)),
        ShiftKind::Mds => {
            let kde = f_x.ok_or_else(|| {
                Error::validation("distribution shift requires a covariate density estimate")
            })?;
            if !kde.in_trim(x) {
                return Ok(None);
            }
            let fx = kde.density(x);
            if fx < density_floor {
                return Ok(None);
            }
            Ok(Some(-(g.cdf(x) - f_status_quo.cdf(x)) / fx))
        }
    }
}
