//! Library side of the `cdcd` binary: configuration and subcommands.

pub mod commands;
pub mod config;

pub use commands::{run, Cli};
pub use config::RunConfig;
