//! Error type shared across the crate.
//!
//! Errors are split into two broad kinds so that callers (in particular the
//! command line frontend) can map them onto distinct exit codes: `Validation`
//! for malformed inputs or configuration, `Numerical` for estimation-stage
//! failures such as non-convergence or degenerate objects.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs, configuration, or dimensions are inconsistent.
    #[error("validation error: {0}")]
    Validation(String),

    /// An estimation step failed numerically (non-convergence, separation,
    /// degenerate denominator, singular system).
    #[error("numerical error in {step}: {message}")]
    Numerical { step: String, message: String },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(step: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numerical {
            step: step.into(),
            message: msg.into(),
        }
    }

    /// Stable machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Numerical { .. } => "numerical",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
