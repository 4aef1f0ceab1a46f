//! `iteconf`: simulate panels, run interval experiments and compare weighting
//! schemes from a TOML experiment file.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "ITE_CONFORMAL_THREADS";

#[derive(Parser)]
#[command(name = "iteconf", version, about = "Conformal intervals for time-varying treatment effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic panels and their potential outcomes.
    Simulate(CommonArgs),
    /// Build intervals and write coverage summaries.
    Run(CommonArgs),
    /// Compare weighting schemes on changepoint experiments.
    CompareWeights(CommonArgs),
}

/// Flags shared by every command. `--seed` overrides the file's `seed`.
#[derive(Args, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub replicates: u64,
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var(THREADS_ENV) {
        let n: usize = value
            .parse()
            .map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got `{value}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Simulate(args) => commands::simulate(args),
        Command::Run(args) => commands::run(args),
        Command::CompareWeights(args) => commands::compare_weights(args),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some runs failed; see manifest.json");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
