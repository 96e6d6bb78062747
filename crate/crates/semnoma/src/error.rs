//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes or dimensions inconsistent with the operation contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Input for which the operation is mathematically undefined
    /// (e.g. normalizing an all-zero feature vector).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A numerical domain violation (negative radicand, non-finite loss, ...).
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    /// Dataset ingestion failure with file-level diagnostics.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Checkpoint container read/write/compatibility failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
