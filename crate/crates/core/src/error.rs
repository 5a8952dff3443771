use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid clamp range [{lo}, {hi}]: need 0 < lo <= hi")]
    InvalidClamp { lo: f64, hi: f64 },

    #[error("covariance is singular: eigenvalue {index} is {value} (clamp before building a transform)")]
    SingularCovariance { index: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("rank {rank} is invalid for dimension {dim}")]
    InvalidRank { rank: usize, dim: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("Renyi order must exceed 1, got {0}")]
    InvalidOrder(f64),

    #[error("target epsilon {target} is unreachable for sigma in [{lo}, {hi}]")]
    InfeasibleTarget { target: f64, lo: f64, hi: f64 },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{path}:{line}: expected {expected} fields, found {found}")]
    RowLength { path: PathBuf, line: usize, expected: usize, found: usize },

    #[error("{path}:{line}: column `{column}` has non-numeric value `{value}`")]
    NonNumeric { path: PathBuf, line: usize, column: String, value: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
