use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("file {0} is empty")]
    EmptyFile(PathBuf),

    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("marginals are infeasible: source mass {source_mass}, target mass {target_mass}")]
    InfeasibleMarginals { source_mass: f64, target_mass: f64 },

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("a support atom of the weighting marginal is missing from the other distribution")]
    SupportMismatch,

    #[error("brute-force enumeration supports at most 4 classes, got {0}")]
    TooManyClasses(usize),

    #[error("sinkhorn kernel underflowed: {0}")]
    NumericalUnderflow(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("label {0} is not one of the head's classes")]
    UnknownLabel(u64),

    #[error("all sampling probabilities are zero")]
    AllZeroProbabilities,

    #[error("softmax Lipschitz constant needs K >= 2, got {0}")]
    InvalidK(usize),

    #[error("row {0} is not a probability vector")]
    RowNotSimplex(usize),

    #[error("need at least two distinct feature rows")]
    InsufficientSamples,

    #[error("invalid overlap {overlap} for {kind} scenario")]
    InvalidOverlap { kind: &'static str, overlap: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::MalformedFile {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
