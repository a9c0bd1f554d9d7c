//! Scenario files and subcommands behind the `sdfwd` binary.

pub mod commands;
pub mod error;
pub mod scenario;

pub use commands::{resolve_out, run, Command, RunContext};
pub use error::{CliError, ErrorRecord};
pub use scenario::{parse_scenario, to_document, Scenario};
