use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error in {path} at line {line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    /// Optimization diverged; carries the last finite loss so callers can report it.
    #[error("optimization diverged after {iterations} iterations (last finite loss {last_loss})")]
    Diverged { iterations: usize, last_loss: f64 },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training error in tensor `{tensor}`: {msg}")]
    Training { tensor: String, msg: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), line, msg: msg.into() }
    }
}
