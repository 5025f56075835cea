use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for a primitive.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A primitive was evaluated outside its domain (log of a non-positive value, ...).
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A caller violated an operation's precondition.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("checksum mismatch in {path}: expected {expected}, found {found}")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("cannot load parameter `{name}`: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("training failed at epoch {epoch}, step {step}: {source}")]
    Training {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite gradient for `{param}` at optimizer step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("{metric}: {source}")]
    Metric {
        metric: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
