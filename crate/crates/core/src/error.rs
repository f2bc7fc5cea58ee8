use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("malformed task instance: {0}")]
    MalformedInstance(String),

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("predicate references unknown object `{0}`")]
    MissingObject(String),

    #[error("invalid predicate: {0}")]
    InvalidPredicate(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("sampler failed for task {task} seed {seed}: {reason}")]
    Sampler { task: String, seed: u64, reason: String },

    #[error("task `{0}` has no language-only prompt (keystep-dependent)")]
    UnsupportedLanguageOnly(String),

    #[error("no solver for predicate {0}")]
    NoSolver(String),

    #[error("parse error in {file} at byte {offset}: {msg}")]
    Parse { file: PathBuf, offset: usize, msg: String },

    #[error("integrity error in {file}: {msg}")]
    Integrity { file: PathBuf, msg: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("i/o error on {path}: {source}")]
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
}
