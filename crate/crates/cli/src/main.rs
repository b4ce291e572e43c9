use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use tta_cli::{CliError, Command};

/// Test-time adaptation experiments on the synthetic shapes benchmark.
#[derive(Parser)]
#[command(name = "tta", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// JSON experiment config; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set adapt.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Render the domains and store them as dataset files.
    Generate,
    /// Train one source model per held-out domain.
    Train,
    /// Run adaptation methods on held-out domains.
    Adapt,
    /// Run a parameter sweep.
    Sweep,
    /// Run the property suites.
    Verify,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Config(e.render().to_string().trim().to_string());
            eprintln!("{}", err.json_line());
            return ExitCode::from(err.code());
        }
    };
    let cmd = match cli.command {
        Cmd::Generate => Command::Generate,
        Cmd::Train => Command::Train,
        Cmd::Adapt => Command::Adapt,
        Cmd::Sweep => Command::Sweep,
        Cmd::Verify => Command::Verify,
    };
    match tta_cli::run(cmd, cli.config.as_deref(), &cli.set, cli.seed, &cli.out, cli.jobs) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.json_line());
            ExitCode::from(e.code())
        }
    }
}
