//! `bimag`: config-driven experiment runner for bookworm continual
//! learning.
//!
//! Subcommands: `gen-data <cfg>` writes a synthetic benchmark to CSV,
//! `run <cfg>` trains and evaluates every configured (variant, seed)
//! pair, `report <dir>` aggregates run records into CSV reports.
//!
//! Exit codes: 0 success, 1 configuration error, 2 I/O or parse error,
//! 3 run failure (partial results are kept).

mod commands;
mod config;
mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Run(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Io(msg) => write!(f, "i/o error: {msg}"),
            CliError::Run(msg) => write!(f, "run failure: {msg}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Run(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "bimag", version, about = "Bookworm continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark and write its dataset files
    GenData {
        /// Experiment config (flat key=value text)
        config: PathBuf,
        /// Redirect the dataset files into this directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every configured (variant, seed) pair
    Run {
        /// Experiment config (flat key=value text)
        config: PathBuf,
        /// Run only this seed, ignoring `run.seeds`
        #[arg(long)]
        seed_override: Option<u64>,
        /// Worker cap for parallel runs (0 = one per core)
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory for run records (default `run.out`)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate run records into summary and curve CSVs
    Report {
        /// Directory containing run-record JSON files
        runs_dir: PathBuf,
        /// Where to write the CSVs (default: the runs directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { config, out } => commands::cmd_gen_data(&config, out.as_deref()),
        Command::Run {
            config,
            seed_override,
            workers,
            out,
        } => commands::cmd_run(&config, seed_override, workers, out.as_deref()),
        Command::Report { runs_dir, out } => report::cmd_report(&runs_dir, out.as_deref()),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
