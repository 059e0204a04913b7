//! Command-line workbench: dataset ingestion, configuration, persistence
//! and the protect / fine-tune / evaluate pipeline.

pub mod args;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;

pub use args::Cli;
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};

/// Resolves the configuration and runs the chosen command.
pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = cli.experiment_config()?;
    commands::run(&cli.command, &cfg)
}
