use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular system (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("degenerate regime: weighted Gram matrix is singular (all K_i ≈ 0 or ≈ 1)")]
    DegenerateRegime,

    #[error("uninformative labels: all responses are equal (mean {0})")]
    UninformativeLabels(f64),

    #[error("unsupported dimension: d = {0} (only d = 2 is supported)")]
    UnsupportedDimension(usize),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate inference: {0}")]
    InferenceDegenerate(String),

    #[error("Monte-Carlo harness failure: {0}")]
    Harness(String),

    #[error("no usable start: {0}")]
    NoStart(String),

    #[error("column `{0}` not found in CSV header")]
    MissingColumn(String),

    #[error("no usable rows after dropping missing values")]
    EmptyData,

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
