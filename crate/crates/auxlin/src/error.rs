//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the library and the CLI layer.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A matrix that must be full rank (or invertible) is not.
    #[error("singular or rank-deficient matrix: {0}")]
    Singular(String),

    /// Too few samples for the requested operation.
    #[error("sample size too small: need N > {min} for d = {d}, got N = {n}")]
    SampleSize { n: usize, d: usize, min: usize },

    /// Requested truncation rank is outside `[1, min(rows, cols)]`.
    #[error("rank {q} out of range for a {rows}x{cols} matrix")]
    RankOutOfRange { q: usize, rows: usize, cols: usize },

    /// A covariance matrix has an eigenvalue below the PSD tolerance.
    #[error("covariance is not positive semidefinite: eigenvalue {0} < -1e-10")]
    NotPsd(f64),

    /// Too many Monte Carlo replicates failed (over 1%).
    #[error("experiment failed: {failed} of {total} replicates errored ({first})")]
    ExperimentFailure {
        failed: usize,
        total: usize,
        first: String,
    },

    /// Malformed experiment config or CLI arguments.
    #[error("config error: {0}")]
    Config(String),

    /// A CSV cell could not be parsed; coordinates are 1-based.
    #[error("{path}: row {row}, column {col}: cannot parse {cell:?} as a number")]
    CsvCell {
        path: String,
        row: usize,
        col: usize,
        cell: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for config/input problems, 3 for
    /// numerical or experiment failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::CsvCell { .. } | Error::InvalidInput(_) | Error::Io(_) => 2,
            Error::Json(_) => 2,
            Error::SampleSize { .. } | Error::RankOutOfRange { .. } | Error::NotPsd(_) => 2,
            Error::Singular(_) | Error::ExperimentFailure { .. } => 3,
        }
    }
}
