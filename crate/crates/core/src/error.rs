use std::path::PathBuf;

use thiserror::Error;

/// Error type for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("degenerate degree: {0}")]
    DegenerateDegree(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("missing bin for node {node_id} at bin {bin} (task {task})")]
    Gap { task: usize, node_id: u64, bin: usize },

    #[error("training diverged in {stage}: last finite loss {last_finite_loss}")]
    Divergence { stage: String, last_finite_loss: f64 },

    #[error("state error: {0}")]
    State(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint checksum error: {0}")]
    Checksum(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("task {task}: {source}")]
    InTask {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn in_task(self, task: usize) -> Error {
        match self {
            e @ Error::InTask { .. } => e,
            e => Error::InTask { task, source: Box::new(e) },
        }
    }

    /// Innermost error, looking through task context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::InTask { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
