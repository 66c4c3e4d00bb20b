//! Command-line front end: run configuration, checkpoint container and the
//! subcommands driving the editing pipeline end to end.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod provenance;
pub mod requests;
pub mod store;

pub use error::{CliError, CliResult};
