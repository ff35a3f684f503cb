//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor ops, data handling, training, and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor operation received incompatible shapes. `op` names the
    /// operation and `detail` names the offending axis or extent.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value is missing, out of range, or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An input value violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    /// An operation was called out of order (e.g. reading gradients
    /// before any backward pass).
    #[error("state error: {0}")]
    State(String),

    /// A data file could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// A data file does not match the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Run directories passed to the report consolidator are unusable.
    #[error("report error: {0}")]
    Report(String),

    /// Training aborted; carries a diagnostic dump of the failing step.
    #[error("training aborted: {0}")]
    Training(String),

    /// A condition the implementation guarantees unreachable was hit.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
