//! Standard-library companion to `icelab-core`: file formats, run
//! orchestration, and the command-line front end.
//!
//! The core crate owns the numerics — models, losses, the edit loop,
//! metrics. This crate owns everything that touches the outside world:
//!
//! * [`checkpoint`] — binary weight files (bit-exact round trips);
//! * [`records`] — edit-record datasets as JSON;
//! * [`config`] — TOML run configuration and CLI overrides;
//! * [`report`] — JSON/CSV result files with a fixed column order;
//! * [`manifest`] — what ran, with which seeds, producing which files;
//! * [`runner`] — the pretrain / edit / continual / ablate / report
//!   commands themselves.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod records;
pub mod report;
pub mod runner;

pub use icelab_core as core;

/// Harness-level failure, carrying the process exit code: 1 for usage
/// errors, 2 for numerical failures, 3 for I/O.
#[derive(Debug)]
pub enum HarnessError {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Numerical(_) => 2,
            HarnessError::Io(_) => 3,
        }
    }

    pub fn io(context: &str, err: impl std::fmt::Display) -> HarnessError {
        HarnessError::Io(format!("{context}: {err}"))
    }
}

impl std::fmt::Display for HarnessError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HarnessError::Usage(msg) => write!(f, "usage error: {msg}"),
            HarnessError::Numerical(msg) => write!(f, "numerical error: {msg}"),
            HarnessError::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<icelab_core::editing::EditError> for HarnessError {
    fn from(e: icelab_core::editing::EditError) -> Self {
        use icelab_core::editing::EditError::*;
        match e {
            BadConfig(msg) => HarnessError::Usage(msg),
            NonFiniteLoss { .. } | EnumerationTooLarge { .. } => {
                HarnessError::Numerical(format!("{e}"))
            }
        }
    }
}

impl From<icelab_core::model::ModelError> for HarnessError {
    fn from(e: icelab_core::model::ModelError) -> Self {
        use icelab_core::model::ModelError::*;
        match e {
            BadConfig(msg) => HarnessError::Usage(msg),
            NonFiniteLoss { .. } => HarnessError::Numerical(format!("{e}")),
        }
    }
}

impl From<icelab_core::corpus::CorpusError> for HarnessError {
    fn from(e: icelab_core::corpus::CorpusError) -> Self {
        HarnessError::Usage(format!("{e}"))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
