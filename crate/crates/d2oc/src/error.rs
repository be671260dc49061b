//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric positive semidefinite: {0}")]
    NotPsd(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("insufficient sample capacity: requested {requested}, remaining {remaining}")]
    InsufficientCapacity { requested: f64, remaining: f64 },

    #[error("relative degree undefined: C A^(l-1) B = 0 for all l <= {n}")]
    RelativeDegreeUndefined { n: usize },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config parse error in {path}: {message}")]
    ConfigParse { path: String, message: String },

    #[error("config invalid ({} violation(s)):\n{}", .0.len(), .0.join("\n"))]
    ConfigInvalid(Vec<String>),

    #[error("run {run} failed at step {step}: {cause}")]
    RunFailed {
        run: usize,
        step: usize,
        cause: String,
    },

    #[error("metrics format error: {0}")]
    MetricsFormat(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
