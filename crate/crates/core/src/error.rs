use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("structural error at {edge}: {detail}")]
    Structural { edge: String, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("ingestion error: unmatched stems {stems:?}")]
    Ingest { stems: Vec<String> },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training error at step {step}: {detail}")]
    Training { step: u64, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl Error {
    pub fn structural(edge: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Structural {
            edge: edge.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Broad failure class, used by the command-line driver to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Data(_) | Error::Ingest { .. } | Error::Metric(_) | Error::Structural { .. } => {
                ErrorClass::Data
            }
            Error::Numeric(_) | Error::Training { .. } => ErrorClass::Training,
            Error::Io { .. } | Error::Format { .. } => ErrorClass::Io,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Training,
    Io,
}
