use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NzkError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NzkError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("moment undefined: {0}")]
    MomentUndefined(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("parse error in {}: {message} (byte offset {offset})", path.display())]
    ParseBytes {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("parse error in {}: {message} (line {line})", path.display())]
    ParseLine {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl NzkError {
    pub(crate) fn shape(context: &'static str, expected: usize, actual: usize) -> Self {
        NzkError::Shape {
            context,
            expected,
            actual,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NzkError::Io {
            path: path.into(),
            source,
        }
    }
}
