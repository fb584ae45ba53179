//! Estimation of unconditional quantile effects for a covariate that is
//! missing from the main (study) sample but observed in an auxiliary sample.
//!
//! The estimator combines the two samples through a propensity model with
//! exponential tilting, fits a conditional outcome model by GMM on the
//! combined moment condition, and evaluates the effect of a marginal
//! distributional shift (location, quantile, or distribution shift) of the
//! missing covariate on a chosen quantile of the outcome. Inference is based
//! on influence functions; a simulation module provides a data-generating
//! process with a brute-force oracle for validation, and a bounds module
//! covers discrete covariates where the effect is only partially identified.

pub mod basis;
pub mod bounds;
pub mod config;
pub mod counterfactual;
pub mod error;
pub mod estimator;
pub mod link;
pub mod nonparam;
pub mod outcome;
pub mod propensity;
pub mod sample;
pub mod sim;
pub mod uqe;

pub use bounds::{estimate_bounds, BoundsResult};
pub use config::EstimatorConfig;
pub use counterfactual::{CounterfactualDistribution, ShiftKind};
pub use error::{Error, Result};
pub use estimator::{fit_design, fit_theta, DesignFit, ThetaEstimate};
pub use sample::{merge_samples, AuxSample, MergedSample, StudySample};
pub use uqe::{estimate_uqe, UqeResult};
