//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid volume metadata: {0}")]
    InvalidMetadata(String),

    #[error("volume is already normalized; refusing to normalize twice")]
    AlreadyNormalized,

    #[error("volume must be normalized to [0,1] before this operation")]
    NotNormalized,

    #[error("volume must be resampled to 1 mm isotropic spacing before this operation")]
    NotIsotropic,

    #[error("point ({0}, {1}, {2}) mm lies outside the volume bounds")]
    OutOfBounds(f64, f64, f64),

    #[error("invalid phantom spec: {0}")]
    InvalidPhantomSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("empty ground-truth segmentation: such cases are excluded from training by policy")]
    EmptyMaskExcluded,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("degenerate distribution: standard deviation is zero but observed value differs from the mean")]
    DegenerateDistribution,

    #[error("non-positive variance in latent hierarchy level {0}")]
    NonPositiveVariance(usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown layer id '{0}'")]
    UnknownLayer(String),

    #[error("refusing to overwrite existing path {0} (pass overwrite to allow)")]
    RefusingOverwrite(PathBuf),

    #[error("unsupported file format for {0}")]
    UnsupportedFormat(PathBuf),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
