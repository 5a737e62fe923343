use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): expected {expected}, got {actual}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("backpropagation terminal node {node} is not scalar (shape {shape:?})")]
    NonScalarTerminal { node: usize, shape: Vec<usize> },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("unbound input `{0}`")]
    UnboundInput(String),

    #[error("non-finite {component} loss at round {round}, client {client}")]
    NonFiniteLoss {
        component: &'static str,
        round: usize,
        client: usize,
    },

    #[error("round {round}, client {client}: {source}")]
    Client {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed snapshot: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
