// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A stream or annotation record could not be decoded or failed schema checks.
    #[error("line {line}: field `{field}`: {message}")]
    Record {
        line: usize,
        field: String,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("estimation infeasible: {0}")]
    Estimation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn record(line: usize, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Record {
            line,
            field: field.into(),
            message: message.into(),
        }
    }

    /// Errors caused by the caller's data or configuration, as opposed to
    /// runtime failures such as I/O or an estimation that cannot proceed.
    pub fn is_validation(&self) -> bool {
        match self {
            Self::File { source, .. } => source.is_validation(),
            e => matches!(
                e,
                Self::InvalidInput(_) | Self::Record { .. } | Self::Config(_)
            ),
        }
    }

    /// Attach the file the error came from.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Self::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
