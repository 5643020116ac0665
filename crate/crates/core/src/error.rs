//! Shared error type for the laboratory.

use thiserror::Error;

/// Errors raised by tensor algebra, samplers, attacks, and runners.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not match or cannot broadcast.
    #[error("shape error: {0}")]
    Shape(String),
    /// A value left its numeric domain (division guard, log of non-positive,
    /// non-finite result).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Invalid configuration or argument.
    #[error("config error: {0}")]
    Config(String),
    /// A replay produced different values than the recorded run, or a tape
    /// does not match the sampler that consumes it.
    #[error("determinism error: {0}")]
    Determinism(String),
    /// A serialized artifact is malformed (bad magic, version, truncation).
    #[error("format error: {0}")]
    Format(String),
    /// Training diverged or failed to reach its configured target.
    #[error("training error: {0}")]
    Training(String),
    /// Compute-graph misuse (second backward, recording on a consumed graph).
    #[error("graph error: {0}")]
    Graph(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn determinism(msg: impl Into<String>) -> Self {
        Error::Determinism(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn training(msg: impl Into<String>) -> Self {
        Error::Training(msg.into())
    }
}
