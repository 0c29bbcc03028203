//! `opt2i`: optimize text-to-image prompts, run benchmark sweeps, and inspect
//! scores from the command line.
//!
//! Exit codes: 0 on success (including runs that stop early), 2 on
//! configuration errors, 3 on backend or infrastructure errors.

mod commands;
mod settings;
mod wiring;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use opt2i_core::{BackendError, Error};

use settings::Overrides;

/// A configuration problem detected by the CLI itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Parser)]
#[command(name = "opt2i", version, about = "Optimize text-to-image prompts by prompting an LLM")]
struct Cli {
    /// Settings file (TOML, or JSON such as a snapshotted settings.json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Optimize one prompt into a run directory.
    Optimize(commands::OptimizeArgs),
    /// Run one or more methods over a dataset.
    Benchmark(commands::BenchmarkArgs),
    /// Score an image against a prompt and print the element table.
    Score(commands::ScoreArgs),
    /// Print the noun phrases (and optionally the questions) of a prompt.
    Decompose(commands::DecomposeArgs),
    /// Print the prompts or the full description of the simulated world.
    SimWorld(commands::SimWorldArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<BackendError>() {
            return if matches!(e, BackendError::MissingCredential(_)) { 2 } else { 3 };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::BudgetMismatch(_) | Error::FilterUndefinedForDcs => 2,
                Error::Backend(BackendError::MissingCredential(_)) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    let result = commands::load_settings(cli.config.as_deref(), &cli.overrides).and_then(|base| match cli.command {
        Command::Optimize(a) => commands::optimize(a, base),
        Command::Benchmark(a) => commands::benchmark(a, base, &cli.overrides),
        Command::Score(a) => commands::score(a, base),
        Command::Decompose(a) => commands::decompose(a, base),
        Command::SimWorld(a) => commands::sim_world(a, base),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
