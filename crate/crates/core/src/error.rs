use std::path::PathBuf;

use thiserror::Error;

use crate::records::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid record: {}", join_violations(.0))]
    InvalidRecord(Vec<Violation>),

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("line {line}: invalid record: {}", join_violations(.violations))]
    InvalidLine {
        line: usize,
        violations: Vec<Violation>,
    },

    #[error("line {line}: vocab size {found} does not match {expected}")]
    VocabMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: duplicate (seq, pos) = ({seq_id}, {pos})")]
    DuplicateKey { line: usize, seq_id: u64, pos: u64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid calibration model: {0}")]
    InvalidModel(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad parameters or unusable paths.
    Config,
    /// Input data failed parsing or validation.
    Data,
    /// A library invariant did not hold.
    Internal,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Io { .. } => ErrorKind::Config,
            Error::Internal(_) => ErrorKind::Internal,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
