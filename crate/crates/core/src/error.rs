use thiserror::Error;

/// Errors produced by the simulation, estimation and reconstruction routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("value {value} outside range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("point outside the domain of the inverse: {0}")]
    Domain(String),

    #[error("numerical failure: {message} (achieved {achieved:e})")]
    Numerical { message: String, achieved: f64 },

    #[error("no convergence: {message} (achieved gap {gap:e})")]
    Convergence { message: String, gap: f64 },

    #[error("enumeration too large: {0}")]
    Capacity(String),

    #[error("no indicator vector within tolerance of {value} (nearest distance {distance:e})")]
    Mismatch { value: f64, distance: f64 },

    #[error("{count} indicator vectors within tolerance of {value}; margin too tight")]
    MarginViolation { value: f64, count: usize },

    #[error("model inconsistency: {0}")]
    Model(String),

    #[error("reconstruction inconsistent: {0}")]
    Consistency(String),

    #[error("spec bound violated: {0}")]
    Bound(String),

    #[error("insufficient overlap: only {fraction} of samples map back into the domain")]
    InsufficientOverlap { fraction: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// True for errors caused by numerical non-convergence rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. }
                | Error::Convergence { .. }
                | Error::Mismatch { .. }
                | Error::MarginViolation { .. }
                | Error::Consistency(_)
                | Error::Domain(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
