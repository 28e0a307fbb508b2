//! Library side of the `steeradv` binary: configuration and the four
//! pipeline commands.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for failures while running a command.
pub const EXIT_RUNTIME: i32 = 1;
/// Exit status for invalid configuration or arguments.
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] steeradv_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "steeradv", version, about = "Train steering CNNs and attack them with L2 evasion attacks")]
pub struct Cli {
    /// INI configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides run.out.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides run.workers.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// Print the resolved configuration before running.
    #[arg(long, global = true)]
    pub show_config: bool,
    /// Overrides any key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Render a synthetic driving dataset.
    Synth,
    /// Train a model on a dataset directory.
    Train,
    /// Attack a trained model on held-out images.
    Attack,
    /// Build the evaluation report from an attack run.
    Eval,
}

impl Cli {
    /// Defaults, then the config file, then `--set`, then the dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for s in &self.set {
            cfg.set_assignment(s).map_err(CliError::Config)?;
        }
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.run.out = out.clone();
        }
        if let Some(workers) = self.workers {
            cfg.run.workers = workers;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.resolve()?;
    if cli.show_config {
        print!("{}", cfg.render());
    }
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Attack => commands::attack(&cfg),
        Command::Eval => commands::eval(&cfg),
    }
}
