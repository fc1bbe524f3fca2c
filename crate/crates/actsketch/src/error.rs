//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by sketching, reconstruction, training, and the
/// experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension disagreement between operands.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    /// Invalid or inconsistent configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An index outside the valid range.
    #[error("index {index} out of range for {what} (valid 0..{len})")]
    IndexOutOfRange {
        what: String,
        index: usize,
        len: usize,
    },

    /// NaN or infinity encountered where finite values are required.
    #[error("non-finite values in {0}")]
    NonFinite(String),

    /// A numerical routine (SVD, QR) failed to produce a usable result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An operation that requires non-zero sketch state was called on an
    /// all-zero (never updated) state.
    #[error("zero sketch state: {0}")]
    ZeroSketch(String),

    /// Malformed or missing data (datasets, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
