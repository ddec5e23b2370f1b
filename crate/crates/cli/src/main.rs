//! `accuquant`: experiment runner for multi-step quantization calibration.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "accuquant", version, about = "Quantization calibration experiments for DDIM samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo step and accumulated error magnitudes.
    ErrorAccum(RunArgs),
    /// Calibrate quantizers group by group and evaluate.
    Calibrate(RunArgs),
    /// Split the one-step Jacobian into schedule and model terms.
    GradDominance(RunArgs),
    /// Calibrate across group sizes or bit-widths.
    Sweep(RunArgs),
    /// Train the toy MLP denoiser and save it.
    TrainDenoiser(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn configure_threads() -> Result<(), CliError> {
    match std::env::var("ACCUQUANT_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("ACCUQUANT_THREADS={v} is not a count")))?;
            Ok(accuquant::numerics::configure_threads(n)?)
        }
        Err(_) => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let (args, cmd): (&RunArgs, fn(&ExperimentConfig, PathBuf) -> Result<(), CliError>) =
        match &cli.command {
            Command::ErrorAccum(a) => (a, commands::error_accum),
            Command::Calibrate(a) => (a, commands::calibrate),
            Command::GradDominance(a) => (a, commands::grad_dominance),
            Command::Sweep(a) => (a, commands::sweep),
            Command::TrainDenoiser(a) => (a, commands::train_denoiser),
        };
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
    cmd(&cfg, out)
}

fn main() -> ExitCode {
    let start = std::time::Instant::now();
    let result = run(Cli::parse());
    eprintln!("wall clock: {:.2}s", start.elapsed().as_secs_f64());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
