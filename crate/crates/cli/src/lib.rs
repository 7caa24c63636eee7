//! Command-line front end: panel files, run configuration and canonical
//! result files.

pub mod args;
pub mod canonical;
pub mod commands;
pub mod error;
pub mod output;
pub mod panel_io;
pub mod space;

pub use args::Cli;
pub use commands::run;
pub use error::{CliError, CliResult, Stage};
