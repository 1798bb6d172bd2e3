use std::path::PathBuf;

use thiserror::Error;

use crate::adapter::ComponentKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("malformed safetensors data: {0}")]
    Format(String),

    #[error("tensor `{name}`: {reason}")]
    Tensor { name: String, reason: String },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    Dtype { name: String, dtype: String },

    #[error("missing entry for layer {layer} component {component}")]
    Coverage { layer: usize, component: ComponentKind },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: line {line}: {reason}")]
    Jsonl {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the file system rather than of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
