//! Crate-wide error type.
//!
//! Variants are grouped by how a caller should react: configuration /
//! precondition problems, file-system problems, malformed cloud files,
//! external extractor failures, and numerical failures detected at runtime.

use std::path::PathBuf;

/// Errors produced by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or violated call precondition.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// File-system failure while reading or writing `path`.
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed PLY content. `offset` is the byte position where parsing stopped.
    #[error("PLY parse failure in {path} at byte {offset}: {message}")]
    PlyParse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// An external feature-extractor process failed or replied with garbage.
    #[error("external extractor failed: {0}")]
    External(String),

    /// Non-finite values or other numerical breakdown.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    ///
    /// 2 = configuration error, 3 = I/O error, 4 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::PlyParse { .. } | Error::External(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
