//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates an invariant. `field` names the offender.
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    /// A pair class required by a statistic is empty.
    #[error("{class} class empty")]
    EmptyPairClass { class: String },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    /// Non-finite value encountered; computations abort rather than propagate NaN.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A data or checkpoint file failed to parse.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn format(message: impl Into<String>) -> Self {
        Error::Format(message.into())
    }

    /// True for failures that indicate a numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
