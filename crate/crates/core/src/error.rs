use thiserror::Error;

/// Errors surfaced by the library. Divergence of a run is not an error; it is
/// recorded on the trace.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid chain: {0}")]
    InvalidChain(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing pass state: {0}")]
    MissingState(&'static str),
    #[error("step size {gamma} exceeds 1/(3 L_grad_loss) = {limit}")]
    StepSizeTooLarge { gamma: f64, limit: f64 },
    #[error("PL constant mu is required for this bound")]
    MissingMu,
    #[error("constants unavailable: {0}")]
    ConstantsUnavailable(String),
    #[error("optimum unavailable: {0}")]
    OptimumUnavailable(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("io error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
