use std::path::PathBuf;

/// Crate-wide error type.
///
/// `Invalid` covers rejected inputs (bad shapes, parameters, malformed
/// files); `Numeric` covers failures arising during computation (singular
/// systems, degenerate statistics, non-finite values). The CLI maps the two
/// groups to distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("simulation blow-up: non-finite state after frame {last_stable_frame}")]
    BlowUp { last_stable_frame: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
