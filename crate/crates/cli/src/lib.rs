//! Hosted side of rmadapter: run configuration, checkpoint files, metrics
//! streams and the subcommands behind the `rmadapter` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

pub use commands::{run, Command};
pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
