use thiserror::Error;

use crate::spectral::SpectralField;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite drift value at grid index {index} (t = {time})")]
    NonFinite { index: usize, time: f64 },

    /// A path left the configured sup-norm envelope. Carries the last finite state.
    #[error("blow-up at t = {time}: sup norm {sup_norm:.3e} exceeds {threshold:.3e}")]
    BlowUp {
        time: f64,
        sup_norm: f64,
        threshold: f64,
        last_state: Box<SpectralField>,
    },

    /// More than 0.1% of the paths of an ensemble blew up.
    #[error("{excluded} of {total} paths blew up; the run is invalid")]
    BlowUpExcess { excluded: usize, total: usize },

    #[error("trace condition violated: {0}")]
    TraceViolation(String),

    #[error("time quadrature budget violated: sample spacing {spacing:.3e} exceeds {limit:.3e}")]
    QuadratureBudget { spacing: f64, limit: f64 },

    #[error("archive: {0}")]
    Archive(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn is_blow_up(&self) -> bool {
        matches!(self, Error::BlowUp { .. })
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
