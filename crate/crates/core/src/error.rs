use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {term}")]
    Numeric { term: String },

    #[error("episode is empty")]
    EmptyEpisode,

    #[error("batch is empty")]
    EmptyBatch,

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("{what} = {value} is out of range (max {max})")]
    Range {
        what: &'static str,
        value: u64,
        max: u64,
    },

    #[error("category `{category}` has {available} images, need {required}")]
    InsufficientSamples {
        category: String,
        available: usize,
        required: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numeric(term: impl Into<String>) -> Self {
        Error::Numeric { term: term.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 1 invariant failure, 2 usage, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } => 3,
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
