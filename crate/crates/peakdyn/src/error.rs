use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PeakError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("argument outside the admissible domain: {0}")]
    Domain(String),

    #[error("window too small: {0}")]
    WindowTooSmall(String),

    #[error("root bracketing failed: {0}")]
    Bracketing(String),

    #[error("invalid initial data: {0}")]
    Construction(String),

    #[error("step rejected at t = {t}: {reason}")]
    StepRejected { t: f64, reason: String },

    #[error("model breakdown at t = {t}: {reason}")]
    Breakdown { t: f64, reason: String },

    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },
}

pub type Result<T> = std::result::Result<T, PeakError>;
