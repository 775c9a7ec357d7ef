use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are not conformable for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation received an input outside its domain (e.g. zero rows).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller violated an API contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The tape was used in a state that does not allow the operation.
    #[error("tape state error: {0}")]
    TapeState(String),

    /// The finite-difference oracle observed a non-deterministic function.
    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// Episode is not eligible for a task (e.g. shorter than the mortality window).
    #[error("task eligibility: {0}")]
    Eligibility(String),

    /// A metric is undefined for the given labels.
    #[error("{metric} is undefined: {reason}")]
    UndefinedMetric { metric: &'static str, reason: String },

    /// The model lacks a capability required by the request.
    #[error("capability error: {0}")]
    Capability(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from invalid user input or configuration
    /// rather than an internal failure. The CLI maps these to exit code 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Input(_)
                | Error::Parse { .. }
                | Error::EmptyDataset(_)
                | Error::Eligibility(_)
                | Error::Capability(_)
                | Error::Json(_)
        )
    }
}
