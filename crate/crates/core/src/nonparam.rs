//! Nonparametric building blocks: empirical quantiles, bandwidth rules,
//! kernel density estimation (plain, weighted, derivatives), and the
//! weighted empirical CDF used to estimate the covariate distribution in
//! the study population from reweighted auxiliary rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compactly supported kernels on `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Epanechnikov,
    Biweight,
    Triangular,
}

impl Default for KernelKind {
    fn default() -> Self {
        KernelKind::Epanechnikov
    }
}

impl KernelKind {
    pub fn eval(self, u: f64) -> f64 {
        if u.abs() >= 1.0 {
            return 0.0;
        }
        match self {
            KernelKind::Epanechnikov => 0.75 * (1.0 - u * u),
            KernelKind::Biweight => {
                let t = 1.0 - u * u;
                0.9375 * t * t
            }
            KernelKind::Triangular => 1.0 - u.abs(),
        }
    }

    /// Derivative K'(u) inside the support.
    pub fn deriv(self, u: f64) -> f64 {
        if u.abs() >= 1.0 {
            return 0.0;
        }
        match self {
            KernelKind::Epanechnikov => -1.5 * u,
            KernelKind::Biweight => -3.75 * u * (1.0 - u * u),
            KernelKind::Triangular => {
                if u >= 0.0 {
                    -1.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Support radius (all supported kernels live on `[-1, 1]`).
    pub fn support_radius(self) -> f64 {
        1.0
    }

    /// Roughness constant `integral of K^2`.
    pub fn int_k_squared(self) -> f64 {
        match self {
            KernelKind::Epanechnikov => 0.6,
            KernelKind::Biweight => 5.0 / 7.0,
            KernelKind::Triangular => 2.0 / 3.0,
        }
    }

    /// Second moment `integral of u^2 K(u)`.
    pub fn int_u2_k(self) -> f64 {
        match self {
            KernelKind::Epanechnikov => 0.2,
            KernelKind::Biweight => 1.0 / 7.0,
            KernelKind::Triangular => 1.0 / 6.0,
        }
    }
}

/// Left-continuous empirical quantile: smallest order statistic at which the
/// ECDF reaches `tau`.
pub fn empirical_quantile(values: &[f64], tau: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::validation("empirical quantile of an empty sample"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::validation(format!(
            "quantile level must lie in (0,1), got {tau}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, tau))
}

/// Same as [`empirical_quantile`] on data already sorted ascending.
pub fn quantile_sorted(sorted: &[f64], tau: f64) -> f64 {
    let n = sorted.len();
    let idx = (tau * n as f64).ceil() as usize;
    sorted[idx.clamp(1, n) - 1]
}

/// Outcome bandwidth rule: `n^-0.01 * 1.06 * min(sd, iqr) * n^-0.2`, the
/// slight undersmoothing of the usual rule of thumb that the inference theory
/// asks for.
pub fn rule_of_thumb_bandwidth(y: &[f64]) -> Result<f64> {
    if y.len() < 2 {
        return Err(Error::validation("bandwidth rule needs at least 2 points"));
    }
    let sd = sample_sd(y);
    let iqr = empirical_quantile(y, 0.75)? - empirical_quantile(y, 0.25)?;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    if spread <= 0.0 {
        return Err(Error::validation("bandwidth rule needs nonzero spread"));
    }
    Ok(rule_of_thumb_from(spread, y.len()))
}

/// The same rule with the spread statistic supplied directly.
pub fn rule_of_thumb_from(spread: f64, n: usize) -> f64 {
    let nf = n as f64;
    nf.powf(-0.01) * 1.06 * spread * nf.powf(-0.2)
}

/// Covariate bandwidth rule: `1.06 * sd * n^-(1/3)`, undersmoothed relative
/// to the density-optimal rate so that the bias of ratio functionals built on
/// this density is negligible.
pub fn covariate_bandwidth(x: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::validation("bandwidth rule needs at least 2 points"));
    }
    let sd = sample_sd(x);
    if sd <= 0.0 {
        return Err(Error::validation("bandwidth rule needs nonzero spread"));
    }
    Ok(1.06 * sd * (x.len() as f64).powf(-1.0 / 3.0))
}

pub fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let ss = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>();
    (ss / (n - 1.0)).sqrt()
}

/// Kernel density estimator with optional per-observation weights.
///
/// Weights are expected to average one over the observations (the natural
/// scale for likelihood-ratio weights); the estimator divides by `n * b`
/// regardless of the weights. Data are held sorted so that evaluation visits
/// only the kernel window.
#[derive(Debug, Clone)]
pub struct WeightedKde {
    xs: Vec<f64>,
    ws: Vec<f64>,
    pub kernel: KernelKind,
    pub bandwidth: f64,
    x_min: f64,
    x_max: f64,
}

impl WeightedKde {
    pub fn new(
        data: &[f64],
        weights: Option<&[f64]>,
        kernel: KernelKind,
        bandwidth: f64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::validation("KDE needs a nonempty sample"));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::validation(format!("bad KDE bandwidth {bandwidth}")));
        }
        if let Some(w) = weights {
            if w.len() != data.len() {
                return Err(Error::validation("KDE weight length mismatch"));
            }
            if w.iter().any(|&wi| !(wi >= 0.0) || !wi.is_finite()) {
                return Err(Error::validation("KDE weights must be nonnegative"));
            }
        }
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.sort_by(|&a, &b| data[a].total_cmp(&data[b]));
        let xs: Vec<f64> = idx.iter().map(|&i| data[i]).collect();
        let ws: Vec<f64> = match weights {
            Some(w) => idx.iter().map(|&i| w[i]).collect(),
            None => vec![1.0; data.len()],
        };
        let (x_min, x_max) = (xs[0], xs[xs.len() - 1]);
        Ok(WeightedKde {
            xs,
            ws,
            kernel,
            bandwidth,
            x_min,
            x_max,
        })
    }

    fn window(&self, x: f64) -> (usize, usize) {
        let lo = self.xs.partition_point(|&v| v < x - self.bandwidth);
        let hi = self.xs.partition_point(|&v| v <= x + self.bandwidth);
        (lo, hi)
    }

    /// Density estimate at `x`.
    pub fn density(&self, x: f64) -> f64 {
        let (lo, hi) = self.window(x);
        let b = self.bandwidth;
        let mut acc = 0.0;
        for i in lo..hi {
            acc += self.ws[i] * self.kernel.eval((self.xs[i] - x) / b);
        }
        acc / (self.xs.len() as f64 * b)
    }

    /// Derivative of the density estimate at `x`.
    pub fn derivative(&self, x: f64) -> f64 {
        let (lo, hi) = self.window(x);
        let b = self.bandwidth;
        let mut acc = 0.0;
        for i in lo..hi {
            acc += self.ws[i] * self.kernel.deriv((self.xs[i] - x) / b);
        }
        -acc / (self.xs.len() as f64 * b * b)
    }

    /// Whether `x` sits inside the boundary-trimmed evaluation region
    /// `[min + radius*b, max - radius*b]` of the observed support.
    pub fn in_trim(&self, x: f64) -> bool {
        let pad = self.kernel.support_radius() * self.bandwidth;
        x >= self.x_min + pad && x <= self.x_max - pad
    }

    pub fn support(&self) -> (f64, f64) {
        (self.x_min, self.x_max)
    }
}

/// KDE value together with its boundary-trim status.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DensityEstimate {
    pub point: f64,
    pub value: f64,
    pub in_trim: bool,
}

impl WeightedKde {
    pub fn density_trimmed(&self, x: f64) -> DensityEstimate {
        DensityEstimate {
            point: x,
            value: self.density(x),
            in_trim: self.in_trim(x),
        }
    }
}

/// Second derivative of a Gaussian-kernel density estimate.
///
/// Used only for the oversmoothed curvature plug-in in the bias term; the
/// compact kernels above are unsuitable here because a consistent second
/// derivative needs `K'` to vanish at the support boundary, and the smooth
/// kernel also keeps the variance constant of this estimate small.
pub fn gaussian_kde_second_derivative(data: &[f64], bandwidth: f64, x: f64) -> f64 {
    let n = data.len() as f64;
    let b = bandwidth;
    let mut acc = 0.0;
    for &xi in data {
        let u = (xi - x) / b;
        acc += (u * u - 1.0) * crate::link::normal_pdf(u);
    }
    acc / (n * b * b * b)
}

/// Weighted empirical CDF over auxiliary covariate values.
///
/// Weights are normalized internally so the terminal value is exactly one.
#[derive(Debug, Clone)]
pub struct WeightedEcdf {
    xs: Vec<f64>,
    /// Cumulative normalized weights aligned with `xs`; last entry is 1.
    cum: Vec<f64>,
}

impl WeightedEcdf {
    pub fn new(data: &[f64], weights: Option<&[f64]>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::validation("ECDF needs a nonempty sample"));
        }
        if let Some(w) = weights {
            if w.len() != data.len() {
                return Err(Error::validation("ECDF weight length mismatch"));
            }
            if w.iter().any(|&wi| !(wi >= 0.0) || !wi.is_finite()) {
                return Err(Error::validation("ECDF weights must be nonnegative"));
            }
        }
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.sort_by(|&a, &b| data[a].total_cmp(&data[b]));
        let xs: Vec<f64> = idx.iter().map(|&i| data[i]).collect();
        let ws: Vec<f64> = match weights {
            Some(w) => idx.iter().map(|&i| w[i]).collect(),
            None => vec![1.0; data.len()],
        };
        let total: f64 = ws.iter().sum();
        if !(total > 0.0) {
            return Err(Error::validation("ECDF weights sum to zero"));
        }
        let mut cum = Vec::with_capacity(ws.len());
        let mut acc = 0.0;
        for &w in &ws {
            acc += w;
            cum.push(acc / total);
        }
        *cum.last_mut().unwrap() = 1.0;
        Ok(WeightedEcdf { xs, cum })
    }

    /// Share of weight at or below `x` (right-continuous step function).
    pub fn cdf(&self, x: f64) -> f64 {
        let k = self.xs.partition_point(|&v| v <= x);
        if k == 0 {
            0.0
        } else {
            self.cum[k - 1]
        }
    }

    /// Left-continuous generalized inverse: smallest data point whose
    /// cumulative weight reaches `u`.
    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let k = self.cum.partition_point(|&c| c < u);
        self.xs[k.min(self.xs.len() - 1)]
    }

    pub fn support(&self) -> (f64, f64) {
        (self.xs[0], self.xs[self.xs.len() - 1])
    }
}
