use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination of values.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller-supplied argument violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),
    /// A file on disk does not follow the expected format.
    #[error("format error in {source_name} at line {line}: {message}")]
    Format {
        source_name: String,
        line: usize,
        message: String,
    },
    /// A checkpoint or blob is structurally inconsistent.
    #[error("corrupt {what}: {message}")]
    Corrupt { what: String, message: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(
        source_name: impl Into<String>,
        line: usize,
        msg: impl Into<String>,
    ) -> Self {
        Error::Format {
            source_name: source_name.into(),
            line,
            message: msg.into(),
        }
    }

    pub(crate) fn corrupt(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Corrupt {
            what: what.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by the caller's configuration or inputs rather
    /// than by a runtime failure. Front ends map these to a usage exit code.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Input(_)
                | Error::Format { .. }
                | Error::Corrupt { .. }
                | Error::Json(_)
        )
    }
}
