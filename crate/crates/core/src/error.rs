use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),

    #[error("invalid utterance id {0:?}")]
    InvalidId(String),

    #[error("unknown utterance id `{0}`")]
    MissingId(String),

    #[error("id sets differ: {0}")]
    IdMismatch(String),

    #[error("non-finite value {value} at {location}")]
    NonFinite { value: f64, location: String },

    #[error("line {line}: expected {expected} columns, got {got}")]
    ColumnCount {
        line: usize,
        expected: &'static str,
        got: usize,
    },

    #[error("line {line}: unknown label token `{token}`")]
    UnknownLabel { line: usize, token: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("tempered normalization did not converge (residual {residual:e})")]
    NonConvergence { residual: f64 },

    #[error("training needs at least two classes, found {0}")]
    SingleClass(usize),

    #[error("trial list needs both target and non-target trials")]
    SingleClassTrials,

    #[error("trial lists differ between score sets")]
    TrialMismatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            value: values[i],
            location: format!("{what}[{i}]"),
        }),
        None => Ok(()),
    }
}

pub(crate) fn ensure_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
