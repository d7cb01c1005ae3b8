//! Command-line front end for the multi-view GP classifier.
//!
//! Exit codes: 0 on success, 2 for invalid flags or configuration, 3 for
//! missing or corrupt data files, 4 for numerical failures during a run.

mod checkpoint;
mod commands;
mod config;
mod records;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mvgp::Error;

use commands::{
    cmd_eval, cmd_noise_sweep, cmd_ood, cmd_sweep, cmd_synth, cmd_train, EvalArgs, NoiseSweepArgs,
    OodArgs, SweepArgs, SynthArgs, TrainArgs,
};

#[derive(Parser)]
#[command(
    name = "mvgp",
    version,
    about = "Multi-view Gaussian process classification with uncertainty-weighted expert fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the three-view synthetic moons dataset plus OOD points.
    Synth(SynthArgs),
    /// Fit one sparse GP expert per view and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on its held-out test split.
    Eval(EvalArgs),
    /// Accuracy grid over noise levels and corrupted view subsets.
    NoiseSweep(NoiseSweepArgs),
    /// Out-of-domain detection from predictive uncertainty.
    Ood(OodArgs),
    /// Metric grid over one hyperparameter across several seeds.
    Sweep(SweepArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidAlphaEps(_)
        | Error::DimensionMismatch { .. }
        | Error::MismatchedBatch { .. }
        | Error::EmptyInput(_) => 2,
        Error::MissingFile { .. }
        | Error::RaggedRows { .. }
        | Error::NonNumericCell { .. }
        | Error::LabelOutOfRange { .. }
        | Error::Io { .. } => 3,
        Error::NotPositiveDefinite { .. }
        | Error::NonFiniteLoss { .. }
        | Error::NonPositiveVariance { .. }
        | Error::NonPositiveWeight { .. }
        | Error::ConfidenceOutOfRange { .. }
        | Error::NonSquare { .. } => 4,
    }
}

/// Cap the worker pool when MVGP_THREADS is set; must run before any
/// rayon work touches the default global pool.
fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("MVGP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| format!("MVGP_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::NoiseSweep(args) => cmd_noise_sweep(args),
        Command::Ood(args) => cmd_ood(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
