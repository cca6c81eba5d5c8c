//! Command-line front end and streaming session service.

pub mod commands;
pub mod service;

pub use commands::{run, Cli, UsageError};
