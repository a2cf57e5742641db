use thiserror::Error;

/// Errors raised across the auditing laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("guesser abstained on every index")]
    AllAbstain,
    #[error("output is unreachable under the conditioning event")]
    UndefinedOutput,
    #[error("enumeration over n = {n} elements exceeds the supported maximum of {max}")]
    Oversized { n: usize, max: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("sweep {name} = {value}: {source}")]
    Sweep { name: String, value: f64, source: Box<Error> },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
