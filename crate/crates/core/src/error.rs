use thiserror::Error;

/// Errors raised by the model, the sampler and the I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("incomplete panel: {} gap(s), first: {}", .gaps.len(), .gaps.first().map(String::as_str).unwrap_or("?"))]
    IncompletePanel { gaps: Vec<String> },

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate cycle: all harmonic coefficients are zero")]
    DegenerateCycle,

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn numerical(msg: impl Into<String>) -> Error {
    Error::Numerical(msg.into())
}
