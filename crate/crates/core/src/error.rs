//! Error taxonomy shared by the library and the CLI.
//!
//! The variants mirror the process exit codes: usage errors are caught by the
//! argument parser before any of these are constructed, `Config` maps to exit
//! code 2, `Runtime` and the I/O / format errors map to 3, and `Diagnostic`
//! (a diagnostic check that ran fine but failed its own assertion) maps to 4.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("config file {path}: {msg}")]
    ConfigFile { path: PathBuf, msg: String },

    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("diagnostic check failed: {0}")]
    Diagnostic(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad file format: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }

    pub fn diagnostic(msg: impl Into<String>) -> Self {
        Error::Diagnostic(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// Process exit code this error maps to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigFile { .. } => 2,
            Error::Runtime(_) | Error::Io { .. } | Error::Format { .. } => 3,
            Error::Diagnostic(_) => 4,
        }
    }
}
