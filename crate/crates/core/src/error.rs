use thiserror::Error;

/// Errors raised by the library. CLI exit codes are derived from
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid scenario: {key}: {message}")]
    Config { key: String, message: String },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("matrix is numerically singular (condition estimate {condition:.3e}): {context}")]
    Singular { condition: f64, context: String },

    #[error("QoS budget infeasible on subcarrier {subcarrier}: epsilon = {epsilon:.6e}")]
    InfeasibleQos { subcarrier: usize, epsilon: f64 },

    #[error("bisection bracket not found after {doublings} doublings")]
    BracketFailure { doublings: usize },

    #[error("bisection did not reach tolerance after {iterations} steps (|g - eps/delta| = {residual:.3e})")]
    ToleranceFailure { iterations: usize, residual: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("missing upstream artifact for stage `{stage}`: {detail}")]
    Dependency { stage: String, detail: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 usage/config, 3 infeasible, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Config { .. } | Error::Dependency { .. } => 2,
            Error::InfeasibleQos { .. } => 3,
            Error::DegenerateGeometry(_)
            | Error::Singular { .. }
            | Error::BracketFailure { .. }
            | Error::ToleranceFailure { .. }
            | Error::NonFinite(_) => 4,
            Error::Io(_) | Error::Serde(_) => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
