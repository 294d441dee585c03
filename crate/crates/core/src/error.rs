use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("node {node} has zero degree; {kind} normalization needs positive degrees")]
    ZeroDegree { node: usize, kind: &'static str },

    #[error("edge ({src}, {dst}) appears with weight {forward} but its reverse has weight {reverse}; directed graphs are not supported")]
    DirectedInput {
        src: usize,
        dst: usize,
        forward: f64,
        reverse: f64,
    },

    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),

    #[error("node id {id} out of range for a graph with {n} nodes")]
    NodeOutOfRange { id: usize, n: usize },

    #[error("communication graph is disconnected; components: {0:?}")]
    Disconnected(Vec<Vec<usize>>),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: String,
        got: String,
    },

    #[error("agent {to} needs a channel from agent {from} for data edge ({dst}, {src})")]
    MissingChannel {
        from: usize,
        to: usize,
        src: usize,
        dst: usize,
    },

    #[error("forward cache does not match the parameters it is used with: {0}")]
    StaleCache(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(
        context: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Dimension {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
