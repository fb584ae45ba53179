//! Error wrapper mapping every failure onto the exit-code contract.

use serde_json::json;

/// A failure with a stable machine-readable kind. `Validation` covers
/// configuration, file, and input problems; `Numerical` covers estimation
/// failures surfaced by the library.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numerical(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    /// Single-line JSON payload for stderr.
    pub fn payload(&self) -> String {
        let (kind, msg) = match self {
            CliError::Validation(m) => ("validation", m),
            CliError::Numerical(m) => ("numerical", m),
        };
        json!({ "error": kind, "message": msg }).to_string()
    }
}

impl From<uqe_core::Error> for CliError {
    fn from(e: uqe_core::Error) -> Self {
        match e.kind() {
            "numerical" => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(format!("result serialization failed: {e}"))
    }
}

/// Attach file or stage context to an error message.
pub trait Context<T> {
    fn context(self, what: &str) -> Result<T, CliError>;
}

impl<T, E: Into<CliError>> Context<T> for Result<T, E> {
    fn context(self, what: &str) -> Result<T, CliError> {
        self.map_err(|e| match e.into() {
            CliError::Validation(m) => CliError::Validation(format!("{what}: {m}")),
            CliError::Numerical(m) => CliError::Numerical(format!("{what}: {m}")),
        })
    }
}
