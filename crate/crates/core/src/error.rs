use std::io;

use thiserror::Error;

/// Errors raised across the simulation, sensing and learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{quantity} = {value} is outside the admissible range {range}")]
    Domain { quantity: &'static str, value: f64, range: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: &'static str },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors that stem from invalid user-provided configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Domain { .. } | Error::Geometry(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
