use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the adaptation pipeline or the harness.
#[derive(Debug, Error)]
pub enum OgaError {
    /// Input file does not match the declared layout.
    #[error("format error: {0}")]
    Format(String),

    /// A value violates a documented domain constraint.
    #[error("validation error: {0}")]
    Validation(String),

    /// Non-finite intermediate or a factorization that could not be recovered.
    #[error("numerics error: {0}")]
    Numerics(String),

    /// Too few samples, or zero spread, to estimate a covariance.
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    /// Invalid or conflicting experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl OgaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OgaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, OgaError>;
