//! Library side of the `dfaf` command: configuration schema and the
//! subcommand implementations, kept separate from argument parsing so tests
//! can drive them directly.

pub mod commands;
pub mod config;

pub use commands::CliError;
pub use config::{ConfigError, RunConfig};
