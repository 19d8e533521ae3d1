//! Error type shared across the library.

use thiserror::Error;

/// Errors produced by dataset construction, training, attacks and analysis.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint index {index} out of range (trajectory has {len} checkpoints)")]
    CheckpointOutOfRange { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported dataset kind: {0}")]
    UnsupportedKind(String),

    #[error("malformed input at {path}, row {row}: {reason}")]
    MalformedRow {
        path: String,
        row: usize,
        reason: String,
    },

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged in model {model} at epoch {epoch}: {detail}")]
    Diverged {
        model: u32,
        epoch: u32,
        detail: String,
    },

    #[error("degenerate variance ({variance:e}) below floor {floor:e} at epoch {epoch}, sample {sample}")]
    DegenerateVariance {
        epoch: u32,
        sample: u32,
        variance: f64,
        floor: f64,
    },

    #[error("score log is missing record for epoch {epoch}, model {model}, sample {sample}")]
    MissingRecord { epoch: u32, model: u32, sample: u32 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("conjugate gradient did not converge: residual {residual:e} after {iterations} iterations (tol {tol:e})")]
    CgNonConvergence {
        residual: f64,
        iterations: usize,
        tol: f64,
    },

    #[error("empty population: {0}")]
    EmptyPopulation(String),

    #[error("vulnerable set is empty (no sample has final advantage above the threshold)")]
    EmptyVulnerableSet,

    #[error("degenerate attack-model class {class}: all training examples share one membership label")]
    DegenerateClass { class: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
