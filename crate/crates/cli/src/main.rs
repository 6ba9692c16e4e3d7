//! `mfg-stable`: declarative experiment runner for the stationary periodic MFG solver.
//!
//! Exit status: 0 on success, 2 on an invalid config, 3 on a solver failure or a refused
//! sensitivity run, 1 on I/O errors.

mod config;
mod error;
mod experiments;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::OutputDir;

#[derive(Debug, Parser)]
#[command(name = "mfg-stable", version, about = "Stationary mean field game experiments on the periodic torus")]
struct Args {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

fn main_inner(args: &Args) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config)?;
    let mut out = OutputDir::create(&args.out)?;
    experiments::run(&cfg, &mut out)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match main_inner(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mfg-stable: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
