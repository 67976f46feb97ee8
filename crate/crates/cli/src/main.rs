//! `rrsgd`: theory, single runs, diagnostics and Monte-Carlo experiments for
//! constant step-size SGD with Richardson-Romberg extrapolation.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "rrsgd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write theory.json: H*, noise covariance, asymptotic covariance, T C and the first-order bias.
    Theory(Common),
    /// Run one coupled (gamma, 2gamma) pair from the [run] section and write run.json.
    Run(Common),
    /// Write decay.csv (coupling contraction) and stationary.csv (stationary moments).
    Diagnose(Common),
    /// Run the Monte-Carlo grid and write results.csv and result.json.
    Experiment(Common),
    /// Recompute rate fits from an existing results.csv and write fits.json.
    Fit(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Override a configuration value, e.g. --set estimator.replications=1000.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (defaults to the available parallelism).
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// Increase log verbosity (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

type Handler = fn(&Common) -> Result<(), error::CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&Common, Handler) = match &cli.command {
        Command::Theory(c) => (c, commands::theory),
        Command::Run(c) => (c, commands::run),
        Command::Diagnose(c) => (c, commands::diagnose),
        Command::Experiment(c) => (c, commands::experiment),
        Command::Fit(c) => (c, commands::fit),
    };
    let level = match common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let workers = common
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start {workers} workers: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(common)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
