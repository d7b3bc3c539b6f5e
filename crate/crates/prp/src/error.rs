//! Crate-wide error type and result alias.

use std::path::PathBuf;

/// Errors produced by the video pipeline, model code, and CLI commands.
///
/// Variants are grouped by how the CLI maps them to exit codes:
/// configuration and input problems exit with code 1, runtime failures
/// (I/O, checkpoint corruption, divergence) exit with code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates a documented invariant.
    #[error("config error: {0}")]
    Config(String),

    /// An operation received arguments outside its documented domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A dataset directory is missing, empty, or malformed.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A checkpoint file is missing, truncated, or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss and was aborted.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Failed to decode an image file.
    #[error("image error in {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error.
    ///
    /// `1` means the invocation itself was wrong (bad flags, bad config,
    /// bad dataset layout); `2` means the run failed while executing.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Dataset(_) => 1,
            Error::Checkpoint(_) | Error::Diverged(_) | Error::Image { .. } => 2,
            Error::Io(_) | Error::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
