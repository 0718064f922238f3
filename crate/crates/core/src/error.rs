use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("regime precondition failed: {0}")]
    Regime(String),
    #[error("unreachable direction: {0}")]
    UnreachableDirection(String),
    #[error("no mass on face; no boundary twist exists")]
    NoFaceMass,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
