//! Run configuration, checkpoints and corpus loading.

pub mod checkpoint;
pub mod config;
pub mod data;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{
    check_compatible, load_checkpoint, peek_checkpoint, save_checkpoint, Checkpoint, DirLock, RngState,
};
pub use config::{Dtype, Family, RunConfig};
pub use data::{load_corpus, truncate_documents};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PersistError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("checkpoint version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint holds {found} arrays, expected {expected}")]
    DtypeMismatch { found: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("checkpoint does not match the config: {0}")]
    ConfigMismatch(String),
    #[error("{0} is locked by another training run")]
    Locked(PathBuf),
}
