//! Configuration handling and subcommands behind the `tta` binary.

pub mod commands;
pub mod config;
pub mod error;

use std::path::{Path, PathBuf};

pub use commands::Context;
pub use config::{ExperimentConfig, RunSection, SweepSection};
pub use error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Train,
    Adapt,
    Sweep,
    Verify,
}

/// Resolves the configuration and runs `cmd`; returns the run directory.
pub fn run(
    cmd: Command,
    config: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    out: &Path,
    jobs: usize,
) -> Result<PathBuf, CliError> {
    if jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let cfg = config::load(config, sets, seed)?;
    let ctx = Context {
        cfg,
        out: out.to_path_buf(),
        jobs,
    };
    match cmd {
        Command::Generate => commands::generate(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Adapt => commands::adapt(&ctx),
        Command::Sweep => commands::sweep(&ctx),
        Command::Verify => commands::verify(&ctx),
    }
}
