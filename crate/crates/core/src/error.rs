// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every pipeline stage.

use thiserror::Error;

/// Errors raised by the steering laboratory.
#[derive(Debug, Error)]
pub enum Error {
    /// Two vectors (or a vector and a model) disagree on dimension.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// A vector whose norm is at or below the zero-norm guard was used where
    /// a direction is required.
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model or run configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A prompt contained a word the vocabulary does not know.
    #[error("unknown token {0:?}")]
    Tokenization(String),

    /// Not enough records to estimate a quantity.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// The design matrix does not have full column rank.
    #[error("singular design: {0}")]
    SingularDesign(String),

    /// A persisted artifact could not be decoded.
    #[error("malformed artifact {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Self::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
