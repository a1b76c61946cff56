//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or mismatched tensor/model dimensions.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An index (layer, neuron, position, token id) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A sequence is too long for the model context or otherwise ill-sized.
    #[error("length error: {0}")]
    Length(String),

    /// A token id exceeds the vocabulary.
    #[error("token id out of range: {0}")]
    Range(String),

    /// Malformed file content; names the offending field or tensor.
    #[error("format error in `{field}`: {reason}")]
    Format { field: String, reason: String },

    /// An operation received an empty input where data is required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Not enough usable data to produce a result.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A ratio whose denominator is numerically zero.
    #[error("degenerate denominator: {0}")]
    DegenerateDenominator(String),

    /// Degenerate (e.g. all-zero) input to a similarity kernel.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Regression design matrix is rank deficient after drops.
    #[error("collinear covariates: {columns:?}")]
    Collinear { columns: Vec<String> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
