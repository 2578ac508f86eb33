use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadLength {
        rows: usize,
        cols: usize,
        len: usize,
    },

    #[error("non-finite value in matrix at index {0}")]
    NonFinite(usize),

    #[error("merge coefficient {0} outside [0, 1]")]
    LambdaOutOfRange(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("library path {0} exists and is not empty")]
    LibraryExists(PathBuf),

    #[error("no library at {0}")]
    NotALibrary(PathBuf),

    #[error("corrupted blob {path}: {reason}")]
    CorruptBlob { path: PathBuf, reason: String },

    #[error("unknown version {version} for class {class_id}")]
    UnknownVersion { class_id: String, version: u64 },

    #[error("unknown class {0}")]
    UnknownClass(String),

    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("average precision needs at least one positive")]
    NoPositives,

    #[error("base model did not reach AP {target} within {epochs} epochs (reached {reached:.4})")]
    PretrainStalled {
        target: f64,
        epochs: usize,
        reached: f64,
    },

    #[error("injected fault at {0:?}")]
    InjectedFault(crate::registry::FaultPoint),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
