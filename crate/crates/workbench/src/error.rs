use std::path::Path;

/// Workbench failures, split by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad or missing configuration or input files.
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Runtime(_) => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }

    /// Unreadable input: a configuration error that names the path.
    pub fn read(path: &Path, err: impl std::fmt::Display) -> Self {
        Error::Config(format!("cannot read {}: {err}", path.display()))
    }

    pub fn write(path: &Path, err: impl std::fmt::Display) -> Self {
        Error::Runtime(format!("cannot write {}: {err}", path.display()))
    }
}

/// Core errors raised while validating inputs are configuration errors.
pub fn invalid(context: &str, err: cpql_core::Error) -> Error {
    Error::Config(format!("{context}: {err}"))
}

pub fn failed(context: &str, err: cpql_core::Error) -> Error {
    Error::Runtime(format!("{context}: {err}"))
}
