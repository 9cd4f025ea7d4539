use thiserror::Error;

/// Errors raised by the operators, the initializer, the solver and the harness.
#[derive(Debug, Error)]
pub enum DemixError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is identically zero")]
    ZeroMatrix,

    #[error("{what} did not converge after {iterations} iterations (last estimate {last_estimate:e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        last_estimate: f64,
    },

    #[error("projection did not converge after {iterations} iterations")]
    ProjectionNotConverged {
        iterations: usize,
        /// Last iterate after a final clip-and-project pass.
        last_iterate: Vec<crate::C64>,
    },

    #[error("stepsize underflow at iteration {iteration} (eta = {step:e}); descent has stalled")]
    StepUnderflow { iteration: usize, step: f64 },

    #[error("non-finite objective at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("could not draw a neighborhood sample after {attempts} attempts")]
    RejectionFailed { attempts: usize },

    #[error("instance checksum mismatch: stored {stored}, regenerated {regenerated}")]
    ChecksumMismatch { stored: String, regenerated: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DemixError>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(DemixError::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
