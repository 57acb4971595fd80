use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the few-shot pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {file}: {message}")]
    Format { file: PathBuf, message: String },

    #[error("class {class} has no items")]
    EmptyClass { class: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("training error: {0}")]
    Train(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn format(file: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (files, config, arguments).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::EmptyClass { .. }
                | Error::Split(_)
                | Error::Sampling(_)
                | Error::Argument(_)
                | Error::Io { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
