//! Configuration, dispatch and serialization for the `orthant` binary.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{run, Outcome};
pub use config::{load_config, parse_config, Command, RunConfig};
