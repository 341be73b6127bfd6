//! Files, runs and the command line around `evset-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod report;
pub mod run;

pub use error::{CliError, Result};
