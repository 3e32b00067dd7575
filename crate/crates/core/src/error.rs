use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A single invalid configuration field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{file}: payload is {actual} bytes, manifest implies {expected}")]
    ByteLength {
        file: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite value in {context} at element offset {offset}")]
    NonFinite { context: String, offset: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("gold index {gold} out of range for {n} choices")]
    GoldOutOfRange { gold: usize, n: usize },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("invalid configuration: {}", join_fields(.0))]
    Config(Vec<FieldError>),

    #[error("memory bank regime violation: {0}")]
    Regime(String),

    #[error("requested {requested} neighbours but only {available} eligible entries")]
    InsufficientEntries { requested: usize, available: usize },

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("degenerate causal split: {0}")]
    DegenerateSplit(String),

    #[error("episode is already done")]
    EpisodeDone,

    #[error("episode is not done")]
    EpisodeNotDone,

    #[error("saliency annotation has no moment windows")]
    NoWindows,

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
}

fn join_fields(fields: &[FieldError]) -> String {
    fields
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}

/// Fails with [`Error::NonFinite`] at the first NaN or infinity.
pub(crate) fn check_finite(context: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(offset) => Err(Error::NonFinite {
            context: context.to_string(),
            offset,
        }),
        None => Ok(()),
    }
}
