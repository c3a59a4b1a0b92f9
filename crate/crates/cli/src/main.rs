//! `qcest`: dataset generation, model training, covariance-recovery
//! experiments and evaluation sweeps.
//!
//! Exit status is 0 on success, 1 on numerical failure and 2 on
//! configuration or I/O errors. Diagnostics go to standard error, data to
//! files.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "qcest", version, about = "Channel estimation with coarsely quantized receivers")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Echo the resolved configuration to standard error before running.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write training and test channel datasets and quantized training
    /// observations.
    Generate,
    /// Fit the configured model and write it to a model file.
    Train,
    /// Run the covariance-recovery experiment and write `recovery.csv`.
    Recover,
    /// Run the SNR sweep and write `results.csv`.
    Evaluate,
    /// Print the header of a dataset or model file.
    Inspect {
        path: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    /// A library error, with what was being done when it occurred.
    Core(String, qcest::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(_, qcest::Error::Numerical(_)) => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Core(ctx, e) => write!(f, "{ctx}: {e}"),
        }
    }
}

/// Attaches context to library errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> Context<T> for qcest::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|e| CliError::Core(what(), e))
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot configure the thread pool: {e}")))?;
    }
    let cfg = resolve(&cli)?;
    if cli.print_config {
        eprint!("{}", cfg.to_toml());
    }
    match &cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Recover => commands::recover(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Inspect { path } => commands::inspect(path),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
