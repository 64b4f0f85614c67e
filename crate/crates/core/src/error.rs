use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("target is not a valid one-hot vector: {0:?}")]
    InvalidOneHot(Vec<f64>),

    #[error("modality index {index} out of range ({count} modalities)")]
    InvalidModality { index: usize, count: usize },

    #[error("quadrature did not converge: coarse {coarse:e}, refined {refined:e}")]
    QuadratureNotConverged { coarse: f64, refined: f64 },

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (parameter norms: {param_norms:?})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        param_norms: Vec<f64>,
    },

    #[error("csv {path}: row {row}, column {column}: {message}")]
    Csv {
        path: String,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported checkpoint format version {0}")]
    FormatVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
