//! `resmps` — train, evaluate, prune, expand, sweep, and inspect
//! residual product-layer classifiers from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format/configuration
//! error, 3 numerical divergence during training.

mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use resmps_core::Error;

#[derive(Parser)]
#[command(
    name = "resmps",
    version,
    about = "Residual product-layer classifiers: training, pruning, \
             interaction-order expansion, and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint and per-epoch metrics
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(commands::EvalArgs),
    /// Magnitude-prune a trained model, retraining between steps
    Prune(commands::PruneArgs),
    /// Interaction-order expansion report of a simple residual model
    Expand(commands::ExpandArgs),
    /// Train fresh models across a grid of initialization scales
    InitSweep(commands::InitSweepArgs),
    /// Channel norms and hidden-state trajectories of a checkpoint
    Diagnose(commands::DiagnoseArgs),
    /// Rewrite a checkpoint between equivalent parameterizations
    Convert(commands::ConvertArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Prune(a) => commands::prune(a),
        Command::Expand(a) => commands::expand(a),
        Command::InitSweep(a) => commands::init_sweep(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Convert(a) => commands::convert(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

/// Honor `RESMPS_THREADS` by capping the global worker pool.  Results
/// are identical for any thread count; the cap only controls CPU use.
fn init_threads() -> resmps_core::Result<()> {
    match std::env::var("RESMPS_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => {
            let n: usize = raw.parse().map_err(|_| {
                Error::Config(format!("RESMPS_THREADS must be a positive integer, got {raw:?}"))
            })?;
            if n == 0 {
                return Err(Error::Config(
                    "RESMPS_THREADS must be a positive integer, got 0".into(),
                ));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))
        }
    }
}
