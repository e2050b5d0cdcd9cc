use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::Entity;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("value error at line {line}: {message}")]
    Value { line: u64, message: String },
    #[error("split error: held-out {entity} has {available} tuples, need {required}")]
    Split {
        entity: String,
        available: usize,
        required: usize,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("held-out entity {0:?} has no context block")]
    MissingBlock(Entity),
}

/// Coarse classification used by the command-line front-end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::MissingBlock(_) => ErrorKind::Config,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Value { .. }
            | Error::Split { .. }
            | Error::Input(_)
            | Error::Json(_) => ErrorKind::Data,
            Error::Contract(_) | Error::UndefinedMetric(_) | Error::Divergence { .. } => {
                ErrorKind::Runtime
            }
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
