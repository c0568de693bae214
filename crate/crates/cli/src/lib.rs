//! Command-line driver for the flowstrike pipeline.

pub mod config;
mod error;
pub mod pipeline;

pub use config::Config;
pub use error::{CliError, Result};
