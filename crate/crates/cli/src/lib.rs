//! Experiment harness: configuration files, the `ssfl` subcommands and the
//! verification checklist.

pub mod commands;
pub mod config;
pub mod error;
pub mod payload;
pub mod stats;
pub mod verify;

pub use config::HarnessConfig;
pub use error::{HarnessError, Result};
