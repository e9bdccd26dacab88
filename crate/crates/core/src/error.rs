use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("critic fit diverged: loss {loss} at step {step}")]
    Divergence { loss: f64, step: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("sampler fingerprint mismatch: calibrated for {calibrated}, live sampler is {live}")]
    FingerprintMismatch { calibrated: String, live: String },

    #[error("content hash mismatch: expected {expected}, computed {computed}")]
    HashMismatch { expected: String, computed: String },

    #[error("{file}: expected {expected} values, found {found}")]
    LengthMismatch {
        file: String,
        expected: usize,
        found: usize,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("dataset has no standardization stats")]
    MissingStats,

    #[error("environment has no analytic action-value")]
    NoAnalyticQ,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
