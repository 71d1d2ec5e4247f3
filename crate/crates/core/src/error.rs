use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numeric precondition on an argument (e.g. unit-norm rows) was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("empty source: {0}")]
    EmptySource(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("could not ingest {} entries under {root}: {}", entries.len(), entries.join(", "))]
    Ingestion { root: PathBuf, entries: Vec<String> },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short category label used in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "shape",
            Error::InvalidInput(_) => "input",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Load { .. } => "load",
            Error::DegenerateBatch(_) => "batch",
            Error::EmptySource(_) => "empty-source",
            Error::Integrity(_) => "integrity",
            Error::Ingestion { .. } => "ingestion",
            Error::Diverged { .. } => "diverged",
            Error::Internal(_) => "internal",
            Error::Io(_) => "io",
        }
    }
}
