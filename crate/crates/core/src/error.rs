use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NotScalar { node: String, shape: Vec<usize> },

    #[error("graph node {node} references node {input}, which does not precede it")]
    InvalidReference { node: usize, input: usize },

    #[error("missing input `{0}`")]
    MissingInput(String),

    #[error("node {0} has no value; evaluate the graph first")]
    NotEvaluated(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("format error in {path} at byte offset {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training aborted at epoch {epoch}, batch {batch}: {detail}")]
    TrainingAborted {
        epoch: usize,
        batch: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
