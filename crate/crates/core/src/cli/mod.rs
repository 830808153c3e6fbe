//! The `helios` command line.

mod bench;
mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use bench::BENCH_COLUMNS;
pub use config::{BaselineConfig, ExperimentConfig, SynthConfig, DEFAULT_FEATURES};

use crate::adaptation::AdaptScope;
use crate::baselines::EnsembleKind;

#[derive(Debug, Parser)]
#[command(name = "helios", version, about = "Solar power classification with source-free adaptation")]
pub struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized component; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target pair as CSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        step_minutes: Option<i64>,
        #[arg(long)]
        shift: Option<f64>,
        /// Climate preset for the source domain (arid, humid, continental).
        #[arg(long)]
        preset: Option<String>,
    },
    /// Ingest, resample, join, label, split and standardize one domain.
    Prepare {
        /// Weather CSV, or a combined weather+power CSV.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Separate solar power CSV joined on timestamps.
        #[arg(long)]
        solar: Option<PathBuf>,
        #[arg(long)]
        solar_schema: Option<PathBuf>,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank features by random-forest importance and write a reduced dataset.
    SelectFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        no_feature_selection: bool,
    },
    /// Train the classifier on a prepared source domain.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a checkpoint to a prepared target domain.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_scope)]
        scope: Option<AdaptScope>,
    },
    /// Evaluate a checkpoint on one split of a prepared domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Fit and evaluate a tree-ensemble baseline.
    Baseline {
        #[arg(long, value_parser = parse_kind)]
        kind: EnsembleKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the scratch/adapt and partial/full matrix over synthetic domains.
    Bench {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_feature_selection: bool,
    },
}

fn parse_scope(s: &str) -> Result<AdaptScope, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<EnsembleKind, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn compute(stage: &str, err: impl fmt::Display) -> Self {
        Self {
            code: 1,
            message: format!("{stage}: {err}"),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("HELIOS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::usage(format!("HELIOS_THREADS must be a positive integer, got {v:?}")))?;
    // A second call in the same process finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(CliError::usage)?,
        None => ExperimentConfig::default(),
    };
    let seed = cli.seed.unwrap_or(config.seed);
    config = config.with_seed(seed);
    config.validate().map_err(CliError::usage)?;
    commands::dispatch(cli.command, &config)
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2));
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
