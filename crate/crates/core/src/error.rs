use std::io;

use thiserror::Error;

/// Errors produced by the solver, analysis and experiment layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    ShapeMismatch {
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },

    #[error("factorization did not converge on a {rows}x{cols} matrix")]
    NoConvergence { rows: usize, cols: usize },

    #[error("W would need {required_bytes} bytes, above the configured cap of {cap_bytes} bytes")]
    ResourceLimit { required_bytes: u128, cap_bytes: u128 },

    #[error("initial error is outside region of convergence (tau = {tau})")]
    OutsideRegion { tau: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("eigenvalue {value} of a truncated orthogonal product left [0, 1] beyond tolerance")]
    SpectrumOutOfRange { value: f64 },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad caller input rather than runtime failure.
    pub fn is_argument_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::Parse { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
