//! `twin-uq`: generate twin datasets, train uncertainty-aware classifiers
//! and evaluate them.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, GenArgs, TrainArgs};

/// Environment variable overriding the worker-thread count.
const THREADS_ENV: &str = "TWIN_UQ_THREADS";

#[derive(Parser, Debug)]
#[command(name = "twin-uq", version, about = "Uncertainty-aware fault classification on digital-twin data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a multi-twin leakage-current dataset
    Gen(GenArgs),
    /// Train a plain, HET or ADF classifier
    Train(TrainArgs),
    /// Evaluate a checkpoint: accuracy, calibration and uncertainty reports
    Eval(EvalArgs),
    /// Re-run the command recorded in a run manifest
    Replay {
        /// Run manifest written by an earlier command
        #[arg(long)]
        manifest: PathBuf,
        /// Write outputs here instead of the recorded output directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // Results do not depend on the thread count; this only bounds CPU use.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Gen(args) => commands::gen(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Replay { manifest, out } => manifest::replay(&manifest, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
