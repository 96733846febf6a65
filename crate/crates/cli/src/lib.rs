//! Command-line entry points and the local HTTP service.

pub mod commands;
pub mod failure;
pub mod server;
pub mod store;
pub mod workspace;

pub use commands::{run, Cli, Command};
pub use failure::{CliResult, Failure};
