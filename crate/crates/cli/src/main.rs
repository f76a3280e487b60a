use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rsgcir_cli::config::LoadedConfig;
use rsgcir_cli::pipeline::{run, Command, RunContext};
use rsgcir_cli::CliError;

/// Regime-switching GCIR term structure and credit pipeline.
#[derive(Debug, Parser)]
#[command(name = "rsgcir", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "rsgcir.toml")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and manifests.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log level: error, warn, info, debug, or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Simulate a synthetic yield panel from the configured model.
    Simulate,
    /// Fit Gaussian HMMs to yield and spread groups.
    Hmm,
    /// Calibrate the rating generator and its mode decomposition.
    CalibrateRatings,
    /// Estimate the rate block.
    EstimateRates,
    /// Estimate the credit block given the rate estimates.
    EstimateCredit,
    /// Price sovereign, policy bank, and corporate bonds.
    Price,
    /// Decompose corporate yields into sovereign and spread components.
    Decompose,
    /// Run the acceptance checks.
    Validate,
    /// Write report tables and charts.
    Report,
}

impl Sub {
    fn command(&self) -> Command {
        match self {
            Sub::Simulate => Command::Simulate,
            Sub::Hmm => Command::Hmm,
            Sub::CalibrateRatings => Command::CalibrateRatings,
            Sub::EstimateRates => Command::EstimateRates,
            Sub::EstimateCredit => Command::EstimateCredit,
            Sub::Price => Command::Price,
            Sub::Decompose => Command::Decompose,
            Sub::Validate => Command::Validate,
            Sub::Report => Command::Report,
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let loaded = LoadedConfig::from_path(&cli.config)?;
    let ctx = RunContext::new(loaded, cli.seed, cli.out.clone());
    let manifest = run(cli.command.command(), &ctx)?;
    log::info!("{}: wrote {} artifacts to {}", manifest.command, manifest.artifacts.len(), cli.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
