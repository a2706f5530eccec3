use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch between fields")]
    GridMismatch,

    #[error("non-finite value at cell {index}")]
    NonFinite { index: usize },

    #[error("evaluation point {point:?} coincides with a charge at {charge:?}")]
    Singularity { point: [f64; 2], charge: [f64; 2] },

    #[error("invalid charge: {0}")]
    InvalidCharge(String),

    #[error("infeasible density: {constraint}")]
    Infeasible { constraint: String },

    #[error("domain too small: {0}")]
    Domain(String),

    #[error("discretization failure: {0}")]
    Discretization(String),

    #[error(
        "solver did not converge after {iterations} iterations (last residual {last_residual:e})"
    )]
    NonConvergence {
        iterations: usize,
        last_residual: f64,
        trace: Vec<f64>,
    },

    #[error("free-energy iteration oscillates; retry with damping below {suggested_damping}")]
    Oscillation { suggested_damping: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
