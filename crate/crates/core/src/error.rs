use std::path::PathBuf;

use thiserror::Error;

/// Every fallible operation in the crate reports through this type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("context overflow: sequence of {len} tokens exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("every position is masked; the loss is undefined")]
    AllMasked,

    #[error("malformed image block at offset {offset}: {reason}")]
    MalformedBlock { offset: usize, reason: String },

    #[error("no legal token: the policy masks the whole vocabulary in state {0}")]
    NoLegalToken(String),

    #[error("non-finite gradient in parameter `{name}` at step {step}")]
    NonFiniteGradient { name: String, step: u64 },

    #[error("training diverged at step {step}")]
    Diverged { step: u64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
