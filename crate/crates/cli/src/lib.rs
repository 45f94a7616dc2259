//! Command-line front end: configuration, orchestration and reports.

pub mod args;
pub mod commands;
pub mod config;
pub mod report;

pub use args::{run, Cli};
pub use commands::{execute, Command};
pub use config::RunConfig;
pub use report::{CommandResult, RunReport, Status};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Core(#[from] rsmp_core::Error),
    #[error("i/o: {0}")]
    Io(String),
}

/// Exit status for failures before or during a run.
pub const EXIT_ERROR: i32 = 1;
