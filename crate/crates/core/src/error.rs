use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid market: {0}")]
    InvalidMarket(String),

    #[error("malformed market document: {0}")]
    Schema(#[from] serde_json::Error),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("price of good {index} must be strictly positive and finite, got {value}")]
    NonPositivePrice { index: usize, value: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unsupported utility family: {0}")]
    UnsupportedFamily(String),

    #[error("rate fit unavailable: {0}")]
    FitUnavailable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidMarket(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
