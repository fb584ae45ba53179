//! Link functions for the propensity and outcome models.
//!
//! A link maps a linear index to a probability. Both the sample-membership
//! propensity and the conditional outcome CDF model are specified as a link
//! applied to a linear index, so first and second derivatives are needed
//! throughout (scores, tilting equations, analytic Jacobians).

use serde::{Deserialize, Serialize};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFunction {
    Logit,
    Probit,
}

impl LinkFunction {
    /// CDF value L(x).
    pub fn cdf(self, x: f64) -> f64 {
        match self {
            LinkFunction::Logit => {
                // Branch on sign to avoid overflow in exp.
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            LinkFunction::Probit => 0.5 * statrs::function::erf::erfc(-x / SQRT_2),
        }
    }

    /// First derivative L'(x).
    pub fn pdf(self, x: f64) -> f64 {
        match self {
            LinkFunction::Logit => {
                let p = self.cdf(x);
                p * (1.0 - p)
            }
            LinkFunction::Probit => FRAC_1_SQRT_2PI * (-0.5 * x * x).exp(),
        }
    }

    /// Second derivative L''(x).
    pub fn pdf_prime(self, x: f64) -> f64 {
        match self {
            LinkFunction::Logit => {
                let p = self.cdf(x);
                p * (1.0 - p) * (1.0 - 2.0 * p)
            }
            LinkFunction::Probit => -x * self.pdf(x),
        }
    }

    /// log L(x), stable for large negative indices.
    pub fn log_cdf(self, x: f64) -> f64 {
        match self {
            LinkFunction::Logit => -softplus(-x),
            LinkFunction::Probit => self.cdf(x).max(f64::MIN_POSITIVE).ln(),
        }
    }

    /// log(1 - L(x)), stable for large positive indices.
    pub fn log_sf(self, x: f64) -> f64 {
        match self {
            LinkFunction::Logit => -softplus(x),
            LinkFunction::Probit => self.cdf(-x).max(f64::MIN_POSITIVE).ln(),
        }
    }

    /// Inverse link (quantile of the latent distribution).
    pub fn inverse(self, p: f64) -> f64 {
        assert!((0.0..=1.0).contains(&p), "inverse link needs p in [0,1]");
        match self {
            LinkFunction::Logit => (p / (1.0 - p)).ln(),
            LinkFunction::Probit => -SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / SQRT_2)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    -SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
}
