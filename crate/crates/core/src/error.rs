use std::fmt;

/// Errors raised across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible shapes, invalid hyperparameters, mismatched specs.
    #[error("configuration error: {0}")]
    Config(String),
    /// Bad caller-supplied data (labels out of range, empty sets, non-finite values).
    #[error("input error: {0}")]
    Input(String),
    /// A binary file failed validation.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    /// Training produced a non-finite loss.
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} ({kind})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        kind: String,
        loss: f64,
    },
    /// An operation was invoked on state that does not satisfy its precondition.
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub(crate) fn input(msg: impl fmt::Display) -> Self {
        Error::Input(msg.to_string())
    }

    pub(crate) fn format(offset: u64, msg: impl fmt::Display) -> Self {
        Error::Format {
            offset,
            message: msg.to_string(),
        }
    }

    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Format { .. } => "format",
            Error::NonFinite { .. } => "non_finite",
            Error::Precondition(_) => "precondition",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
