use std::fmt;

use thiserror::Error;

/// Errors raised anywhere in the engine.
///
/// Each variant maps to a short, stable class name (see [`Error::class`]) so
/// command-line failures can be grepped without parsing free text.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Index { .. } => "index",
            Error::Input(_) => "input",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Training(_) => "training",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn input(msg: impl fmt::Display) -> Self {
        Error::Input(msg.to_string())
    }

    pub(crate) fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub(crate) fn checkpoint(msg: impl fmt::Display) -> Self {
        Error::Checkpoint(msg.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
