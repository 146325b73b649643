use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("insufficient resolution: {0}")]
    Resolution(String),
    #[error("no valid concentration pair: {0}")]
    NoValidPair(String),
    #[error("enumeration cap exceeded: {0}")]
    Cap(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("coverage failure: {0}")]
    Coverage(String),
    #[error("indeterminate: {0}")]
    Indeterminate(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
