use std::path::PathBuf;

use aftermath_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("cannot load {}: {msg}", path.display())]
    Load { path: PathBuf, msg: String },
    #[error("parse error in {} at line {line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Load { path: path.into(), msg: msg.into() }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
