//! Experiment orchestration behind the `xagg` command-line tool.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod pipeline;

pub use error::{CliError, CliResult, ErrorKind};
