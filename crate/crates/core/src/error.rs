use alloc::string::String;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Param { name: &'static str, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),
    #[error("split protocol: {0}")]
    Protocol(String),
    #[error("data: {0}")]
    Data(String),
}

impl Error {
    pub fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Param {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
