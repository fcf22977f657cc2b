//! Crate-wide error type. Config/shape/domain violations are separated from
//! runtime failures so the CLI can map them onto distinct exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (schema violations, inconsistent settings).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or feature-map shapes inconsistent with the operation contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input values outside the operation's domain (bad boxes, coords, ids).
    #[error("domain error: {0}")]
    Domain(String),

    /// Failure during training/inference (NaN loss, missing state).
    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
