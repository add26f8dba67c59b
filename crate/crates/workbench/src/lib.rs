//! IO, configuration, grid runner and command line around `cpql-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod o2o;
pub mod sweep;
pub mod verify;

pub use config::{ExperimentConfig, Operator};
pub use error::{Error, Result};
