use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("infeasible state: {n_ads} ads + {n_organics} organics cannot fill {slots} slots")]
    InfeasibleState {
        slots: usize,
        n_ads: usize,
        n_organics: usize,
    },

    #[error("infeasible action {action}: state has {n_ads} ads and {n_organics} organics")]
    InfeasibleAction {
        action: String,
        n_ads: usize,
        n_organics: usize,
    },

    #[error("action has {got} slots, expected {expected}")]
    SlotCountMismatch { expected: usize, got: usize },

    #[error("unknown user id {0}")]
    UnknownUser(u32),

    #[error("candidate pool too small: need {needed} {role}, have {available}")]
    InsufficientPool {
        role: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("categorical id {id} out of range for table with {rows} rows")]
    IdOutOfRange { id: usize, rows: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("need {needed} records from other requests, only {available} available")]
    InsufficientNegatives { needed: usize, available: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("schema version mismatch: file has {found}, expected {expected}")]
    SchemaVersion { expected: u32, found: u32 },

    #[error("config hash mismatch: file has {found}, expected {expected}")]
    ConfigHash { expected: String, found: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("no requests to aggregate")]
    NoRequests,

    #[error("unknown sweep parameter {0:?}")]
    UnknownParameter(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding failed: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
