use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the operation's domain (bad shape, out-of-range value, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A run or model configuration that cannot be honored.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("load error for {path}: {detail}")]
    Load { path: PathBuf, detail: String },

    #[error("digest mismatch for {path}: expected {expected}, found {actual}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    /// Training produced a NaN/inf loss; `snapshot` holds the offending values.
    #[error("non-finite loss at step {step}: {snapshot}")]
    NonFinite { step: u64, snapshot: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Load { .. } => "load",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
