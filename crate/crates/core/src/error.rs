use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Configuration,
    DataIntegrity,
    NumericFault,
    Other,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("timestep {t} out of range [1, {max}]")]
    Index { t: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric fault at timestep {timestep:?}: {message}")]
    Numeric {
        message: String,
        timestep: Option<usize>,
    },

    #[error("non-finite loss at iteration {iteration}; last good checkpoint: {last_good:?}")]
    NonFiniteLoss {
        iteration: u64,
        last_good: Option<PathBuf>,
    },

    #[error("frozen parameter {parameter} drifted at iteration {iteration}")]
    FrozenDrift { iteration: u64, parameter: String },

    #[error("lexicon error: {0}")]
    Lexicon(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("mix error: need {required} synthetic records, only {available} available")]
    Mix { required: usize, available: usize },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("comparison refused: {0}")]
    Comparison(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path:?}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parameter { .. }
            | Error::Config(_)
            | Error::Lexicon(_)
            | Error::Split(_)
            | Error::Mix { .. }
            | Error::Comparison(_) => ErrorClass::Configuration,
            Error::Integrity(_) | Error::Image { .. } | Error::FrozenDrift { .. } => {
                ErrorClass::DataIntegrity
            }
            Error::Numeric { .. } | Error::NonFiniteLoss { .. } => ErrorClass::NumericFault,
            Error::Shape { .. }
            | Error::Index { .. }
            | Error::Contract(_)
            | Error::Io { .. }
            | Error::Serde(_) => ErrorClass::Other,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
