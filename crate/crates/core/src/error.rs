use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unreachable: no route from edge {origin} to edge {dest}")]
    Unreachable { origin: usize, dest: usize },
    #[error("route is not connected: edges {from} -> {to} at position {index} are not adjacent")]
    NotAdjacent { index: usize, from: usize, to: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("network fingerprint mismatch: checkpoint {expected:016x}, data {found:016x}")]
    Fingerprint { expected: u64, found: u64 },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
