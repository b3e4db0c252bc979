//! Scenario runner for fully test-time adaptation: training, corruption,
//! adaptation, benchmarking, self-checks, and figure data.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod report;
pub mod selftest;
pub mod sources;
pub mod svg;

pub use cli::{run, Cli, Command};
pub use error::{CliError, Result};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "TTA_OUT_ROOT";
