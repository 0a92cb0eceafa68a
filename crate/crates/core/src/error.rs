use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DemixError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DemixError {
    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration parameter is invalid or infeasible.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Vector or matrix dimensions do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Rejection sampling ran out of budget.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// The channel-1 PSF spectrum is too close to zero to divide by.
    #[error("ill-conditioned PSF: |g1[{index}]| = {modulus:e} is below the floor {floor:e}")]
    IllConditionedPsf {
        index: usize,
        modulus: f64,
        floor: f64,
    },

    /// The certificate interpolation system is numerically singular.
    #[error(
        "interpolation system is singular (condition estimate {condition:e}, ||W_g|| = {wg_norm:.4})"
    )]
    Singular { condition: f64, wg_norm: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl DemixError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DemixError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DemixError::Numerical(_) | DemixError::Singular { .. } => 2,
            _ => 1,
        }
    }
}
