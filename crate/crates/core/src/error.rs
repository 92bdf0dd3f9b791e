use thiserror::Error;

/// Errors raised by the library.
///
/// The categories map onto the CLI exit codes: configuration problems exit
/// with 2 and invariant failures with 3.
#[derive(Debug, Error)]
pub enum Error {
    /// An input is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A caller broke a precondition (shape mismatch, wrong grid, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A runtime-checked guarantee failed. Always a bug.
    #[error("invariant failure: {0}")]
    Invariant(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }

    /// Short machine-readable category name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Numeric(_) => "numeric",
            Error::Invariant(_) => "invariant",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
