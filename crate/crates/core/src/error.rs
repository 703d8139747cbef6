use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the numerical core, the dataset layer and the trainer.
#[derive(Debug, Error)]
pub enum CuError {
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {diff:e}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },

    #[error("matrix is ill-conditioned (condition estimate {estimate:e})")]
    IllConditioned { estimate: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite entry in {what}")]
    NonFinite { what: &'static str },

    #[error("exact Laplace density needs an odd dimension, got {dim}")]
    UnsupportedOrder { dim: usize },

    #[error("Laplace density is singular at zero radius for dimension {dim}")]
    DegenerateRadius { dim: usize },

    #[error("mixture scale phi must be positive, got {0}")]
    NonPositivePhi(f64),

    #[error("quadratic form must be positive, got {0}")]
    NonPositiveQ(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("loss family mismatch: expected {expected}, got {actual}")]
    FamilyMismatch { expected: String, actual: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("tape does not match the network it is replayed against")]
    TapeMismatch,

    #[error("non-finite gradient encountered")]
    NonFiniteGradient,

    #[error("dataset family {dataset} does not match configured family {config}")]
    DatasetFamilyMismatch { dataset: String, config: String },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("manifest digest mismatch for {}", path.display())]
    ManifestMismatch { path: PathBuf },

    #[error("corrupt record at {}:{line}: {reason}", path.display())]
    CorruptRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("I/O failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CuError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CuError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CuError>;
