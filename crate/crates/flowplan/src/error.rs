//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, FlowError>;

/// Errors surfaced by planner, environment, and tooling code.
///
/// Variants are grouped by contract: `Shape`/`Input`/`Config` are caller
/// mistakes, `Numeric` means a computation produced non-finite values,
/// `Parse`/`Reference` come from data ingestion, and `Io` wraps filesystem
/// failures.
#[derive(Debug, Error)]
pub enum FlowError {
    /// Dimension mismatch between tensors, embeddings, or network layers.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument value (empty input, out-of-range scalar, unknown id).
    #[error("input error: {0}")]
    Input(String),

    /// Invalid configuration (bad stage counts, non-positive sizes, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A computation produced NaN or infinity.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A data file failed to parse; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A record references an entity that does not exist.
    #[error("reference error: {0}")]
    Reference(String),

    /// Filesystem failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl FlowError {
    /// Shorthand used by validation helpers.
    pub fn shape(msg: impl Into<String>) -> Self {
        FlowError::Shape(msg.into())
    }

    /// Shorthand used by validation helpers.
    pub fn input(msg: impl Into<String>) -> Self {
        FlowError::Input(msg.into())
    }

    /// Shorthand used by validation helpers.
    pub fn numeric(msg: impl Into<String>) -> Self {
        FlowError::Numeric(msg.into())
    }
}
