use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use softguide_cli::commands::{self, Globals};
use softguide_cli::LoadedConfig;

/// Reward-guided sampling from pre-trained diffusion models.
#[derive(Parser, Debug)]
#[command(name = "softguide", version)]
struct Cli {
    /// Override the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to one per core. Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the configured sampler once.
    Run { config: PathBuf },
    /// Run the sampler at every point of the `[sweep]` grid.
    Sweep { config: PathBuf },
    /// Write the exact pre-trained and tilted laws.
    Oracle { config: PathBuf },
    /// Iteratively refine the `[refine]` seed state.
    Refine { config: PathBuf },
    /// Distill the guided sampler into a tabular student.
    Distill { config: PathBuf },
    /// Parse and validate a config without running it.
    Check { config: PathBuf },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("cannot start the thread pool")?;
    }
    let globals = Globals { seed: cli.seed, out_dir: cli.out_dir };
    let (path, cmd): (_, fn(&LoadedConfig, &Globals) -> Result<PathBuf>) = match &cli.command {
        Command::Check { config } => return commands::check(config),
        Command::Run { config } => (config, commands::run),
        Command::Sweep { config } => (config, commands::sweep),
        Command::Oracle { config } => (config, commands::oracle),
        Command::Refine { config } => (config, commands::refine_cmd),
        Command::Distill { config } => (config, commands::distill),
    };
    let cfg = LoadedConfig::load(path)?;
    let dir = cmd(&cfg, &globals)?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}
