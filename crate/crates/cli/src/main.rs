//! Experiment CLI: every subcommand reads a JSON config and writes its
//! artifacts (CSV metrics, JSON configs/trajectories, DBPC tensors) into the
//! output directory. Exit codes: 0 success, 2 config error, 3 numeric or
//! training error, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dbplab_core::error::Error;
use dbplab_core::lab::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dbplab", version, about = "Diffusion-based purification laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write it as a tensor container.
    Synth(RunArgs),
    /// Train the denoiser with the standard noise-prediction objective.
    TrainDiffusion(RunArgs),
    /// Train the toy classifier.
    TrainClassifier(RunArgs),
    /// Fine-tune a pretrained denoiser with adversarial denoising training.
    Addt(RunArgs),
    /// Evaluate clean/attacked accuracy across all knowledge settings.
    Eval(RunArgs),
    /// Produce the EoT sweep, gradient-variance report, and loss landscape.
    Analyze(RunArgs),
    /// Print the default config as a starting point.
    DefaultConfig,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Format(_) => 2,
        Error::Numeric(_) | Error::Training(_) | Error::Shape(_) | Error::Determinism(_) => 3,
        _ => 1,
    }
}

fn run(args: &RunArgs, f: impl Fn(&ExperimentConfig, &std::path::Path) -> dbplab_core::Result<()>) -> ExitCode {
    let cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for(&e));
        }
    };
    match f(&cfg, &args.out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Synth(a) => run(&a, lab::run_synth),
        Command::TrainDiffusion(a) => run(&a, lab::run_train_diffusion),
        Command::TrainClassifier(a) => run(&a, lab::run_train_classifier),
        Command::Addt(a) => run(&a, lab::run_addt),
        Command::Eval(a) => run(&a, lab::run_eval),
        Command::Analyze(a) => run(&a, lab::run_analyze),
        Command::DefaultConfig => {
            println!("{}", ExperimentConfig::toy_default().to_json_pretty());
            ExitCode::SUCCESS
        }
    }
}
