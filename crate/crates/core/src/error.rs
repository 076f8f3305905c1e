use std::path::PathBuf;

use crate::engine::{Category, Mode};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in {name}")]
    Numeric { name: String },

    #[error("sequence length {len} exceeds maximum {max}")]
    Length { len: usize, max: usize },

    #[error("kv-cache capacity exceeded: need {needed} positions, capacity {capacity}")]
    Capacity { needed: usize, capacity: usize },

    #[error("wrong model head: expected {expected}, found {found}")]
    HeadKind {
        expected: &'static str,
        found: &'static str,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dataset {0} is empty")]
    EmptyDataset(PathBuf),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("operation requires {required:?} mode, engine is in {current:?} mode")]
    Mode { required: Mode, current: Mode },

    #[error("shard integrity error: {0}")]
    Integrity(String),

    #[error("memory budget exceeded on worker {worker} allocating {bytes} bytes of {category:?} (budget {budget})")]
    Budget {
        worker: usize,
        category: Category,
        bytes: u64,
        budget: u64,
    },

    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0:?}")]
    UnsupportedVersion([u8; 4]),

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
