use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A shape or precondition check failed.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("alpha {alpha} is below the configured floor {alpha_min}")]
    AlphaBelowFloor { alpha: f64, alpha_min: f64 },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },

    #[error("sketch file {path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("sketch file {path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("sketch file {path}: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CrcMismatch {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("sketch file {path}: {msg}")]
    Truncated { path: PathBuf, msg: String },

    #[error("unknown document id {0:?}")]
    UnknownDocument(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub(crate) fn ensure_dim(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { op, expected, got })
    }
}
