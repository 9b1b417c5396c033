use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: dates not strictly increasing at line {line} ({date})")]
    NonMonotoneDates {
        path: PathBuf,
        line: u64,
        date: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("matrix is singular or not positive definite ({context}, condition estimate {condition:e})")]
    Singular { context: &'static str, condition: f64 },

    #[error("recursive least-squares state corrupted: gain denominator {0:e}")]
    RlsCorrupted(f64),

    #[error("estimator used before initialization: {0}")]
    Uninitialized(&'static str),

    #[error("forecast for period {forecast} cannot be scored against period {realized}")]
    PeriodMismatch { forecast: usize, realized: usize },

    #[error("infeasible constraints: {0}")]
    Infeasible(String),

    #[error("solver did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("period index {index} out of range (0..{len})")]
    OutOfRange { index: usize, len: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("sharpe ratio undefined: return series has zero variance")]
    ZeroVariance,
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for failures rooted in the numbers rather than the inputs' shape or files.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Singular { .. }
                | Error::RlsCorrupted(_)
                | Error::Infeasible(_)
                | Error::NoConvergence(_)
                | Error::ZeroVariance
        )
    }
}
