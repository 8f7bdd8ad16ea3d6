use peakdyn::PeakError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    /// The data violate the smallness hypotheses, or the run left them.
    #[error("hypothesis violation: {0}")]
    Hypothesis(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Hypothesis(_) => 3,
            Self::Numerical(_) | Self::Io(_) => 4,
        }
    }
}

impl From<PeakError> for CliError {
    fn from(e: PeakError) -> Self {
        match e {
            PeakError::Parameter(_) => Self::Config(e.to_string()),
            PeakError::Breakdown { .. } => Self::Hypothesis(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Io(std::io::Error::other(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Io(std::io::Error::other(e))
    }
}
