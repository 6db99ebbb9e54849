//! Library side of the `mzimesh` command-line tool: configuration, the
//! individual commands and the repeated-seed experiment harnesses.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;

pub use config::{Family, RunConfig};
pub use error::CliError;
