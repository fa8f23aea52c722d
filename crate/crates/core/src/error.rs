//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero vector cannot be normalized onto the sphere")]
    ZeroVector,

    #[error("sphere dimension must be at least 2, got {0}")]
    DimensionTooSmall(usize),

    #[error("degenerate geodesic: endpoints are antipodal within tolerance")]
    DegenerateGeodesic,

    #[error("probe vector is not tangent at its base point (|<probe, z>| = {dot:.3e})")]
    ProbeNotTangent { dot: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("{count} of {total} points failed to score; first failing indices: {indices:?}")]
    BatchFailures {
        count: usize,
        total: usize,
        indices: Vec<usize>,
    },

    #[error("empty input where at least one element is required")]
    EmptyInput,

    #[error("retained set is empty at rejection fraction {fraction}")]
    EmptyRetainedSet { fraction: f64 },

    #[error("metric requires both classes present in the labels")]
    SingleClass,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Non-finite diagnostic with a short location string, e.g. a block index.
    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
