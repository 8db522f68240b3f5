//! `wcub`: runs each stage of the cubature pipeline and writes CSV/JSON
//! artifacts.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.

mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use wiener_cubature::Error;

use config::Overrides;

#[derive(Parser)]
#[command(name = "wcub", version, about = "Wiener-space cubature experiments")]
struct Cli {
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a cubature formula and check its moment conditions.
    Formula(Overrides),
    /// Build and recombine the cubature tree, writing the weight table.
    Preprocess(Overrides),
    /// Cubature and Monte Carlo estimates for one problem.
    Estimate(Overrides),
    /// Error-versus-path-count sweep for both estimators.
    Bench(Overrides),
    /// Train a toy latent SDE with cubature and Monte Carlo gradients.
    Train(Overrides),
}

/// A check that ran but failed numerically.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<NumericalFailure>() {
            return 3;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::InvalidParameter(_)
                | Error::UnsupportedDimension { .. }
                | Error::LevelTooLarge(_)
                | Error::IndexOutOfRange { .. }
                | Error::TreeTooLarge { .. }
                | Error::DimensionMismatch(_)
                | Error::ManifestMismatch(_)
                | Error::OracleUnavailable
                | Error::Io(_)
                | Error::Json(_) => 2,
                Error::NoNullVector { .. }
                | Error::MatchFailure { .. }
                | Error::NonFiniteState { .. }
                | Error::SingularDiffusion { .. }
                | Error::NonFiniteGradient { .. }
                | Error::DivergenceDetected { .. } => 3,
            };
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match cli.command {
        Command::Formula(o) => commands::formula(&o.resolve()?),
        Command::Preprocess(o) => commands::preprocess_cmd(&o.resolve()?),
        Command::Estimate(o) => commands::estimate(&o.resolve()?),
        Command::Bench(o) => commands::bench(&o.resolve()?),
        Command::Train(o) => commands::train(&o.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
