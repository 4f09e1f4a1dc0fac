use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value or argument is outside its allowed range.
    #[error("parameter: {0}")]
    Param(String),

    /// Required input data is missing or inconsistent.
    #[error("input: {0}")]
    Input(String),

    /// Two inputs that must agree in shape do not.
    #[error("dimension: {0}")]
    Dimension(String),

    /// A numerical kernel received data it cannot evaluate (zero-norm vectors, ...).
    #[error("degenerate: {0}")]
    Degenerate(String),

    /// A synthetic scene description is invalid.
    #[error("spec: {0}")]
    Spec(String),

    /// A binary or JSON file does not follow its declared format.
    #[error("format: {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short, stable tag for the error kind; also the prefix of its message.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Param(_) => "parameter",
            Error::Input(_) => "input",
            Error::Dimension(_) => "dimension",
            Error::Degenerate(_) => "degenerate",
            Error::Spec(_) => "spec",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
