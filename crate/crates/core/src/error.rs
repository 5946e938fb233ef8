use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("embedding width {dim} is not divisible by {heads} heads")]
    HeadsDoNotDivide { dim: usize, heads: usize },

    #[error("attention query row {row} has every key masked")]
    FullyMaskedRow { row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown task id `{0}`")]
    UnknownTask(String),

    #[error("unknown object id {0}")]
    UnknownObject(usize),

    #[error("cannot resolve instruction `{0}`")]
    Unresolvable(String),

    #[error("scripted expert exhausted the horizon of {0} steps")]
    HorizonExhausted(usize),

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("noise level {sigma} outside [{min}, {max}]")]
    SigmaOutOfRange { sigma: f64, min: f64, max: f64 },

    #[error("time ordering violated: {0}")]
    Ordering(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("timer monotonicity violated")]
    Timer,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
