//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TgdpError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing dependency for phase {phase}: {what}")]
    Dependency { phase: String, what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TgdpError>;

impl TgdpError {
    pub fn argument(msg: impl Into<String>) -> Self {
        TgdpError::Argument(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        TgdpError::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        TgdpError::Format(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        TgdpError::Config(msg.into())
    }
    pub fn dependency(phase: impl Into<String>, what: impl Into<String>) -> Self {
        TgdpError::Dependency { phase: phase.into(), what: what.into() }
    }
}
