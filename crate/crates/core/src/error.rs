use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A record or task line failed schema or invariant checks.
    #[error("validation failed at line {line}: field `{field}`: {message}")]
    Validation {
        line: usize,
        field: String,
        message: String,
    },

    /// Same as [`Error::Validation`] for values that did not come from a file.
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },

    #[error("degenerate probability {value} in {what}; probabilities below 1e-12 are rejected")]
    DegenerateProbability { what: String, value: f64 },

    #[error("capability missing: {0}")]
    Capability(String),

    #[error("records must share (service, task, context): {0}")]
    Grouping(String),

    #[error("cannot build a profile from an empty value list")]
    EmptyProfile,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("insufficient labels: requested {requested} labeled samples, {available} available")]
    InsufficientLabels { requested: usize, available: usize },

    #[error("labeling error: {0}")]
    Labeling(String),

    #[error("record store is missing invocations for {} setting(s): {}", .0.len(), .0.join(", "))]
    Coverage(Vec<String>),

    #[error("incompatible model file: {0}")]
    Incompatible(String),

    /// Retryable network failure.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("malformed service response: {0}")]
    Protocol(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures worth retrying (network-level problems).
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }
}
