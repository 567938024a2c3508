use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by the exit code the command-line front end maps them to.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("no interactions left after filtering with threshold {threshold}")]
    EmptyAfterFilter { threshold: usize },

    #[error("user {user} has {len} interactions; at least 3 are needed for a leave-one-out split")]
    SequenceTooShort { user: usize, len: usize },

    #[error("data: {0}")]
    Data(String),

    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("graph has no edges")]
    EmptyGraph,

    #[error("gradient graph: {0}")]
    Graph(String),

    #[error("non-finite value in {component}: {value}")]
    NonFinite { component: String, value: f64 },

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code used by the binary: 2 parse/config, 3 data, 4 numeric, 5 protocol.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } | Error::Config(_) => 2,
            Error::EmptyInput(_)
            | Error::EmptyAfterFilter { .. }
            | Error::SequenceTooShort { .. }
            | Error::Data(_)
            | Error::EmptyGraph
            | Error::Io { .. } => 3,
            Error::Dimension { .. }
            | Error::Index { .. }
            | Error::Graph(_)
            | Error::NonFinite { .. }
            | Error::Verification(_) => 4,
            Error::Protocol(_) => 5,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
