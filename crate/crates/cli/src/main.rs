//! `slr`: batch front end for sparse plus low-rank layer decomposition.
//!
//! Exit codes: 0 success, 2 usage error, 3 bad input data, 4 numerical
//! failure. Errors are reported as one JSON object on stderr.

mod args;
mod blockio;
mod commands;
mod error;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::commands::{BenchArgs, CascadeArgs, DecomposeArgs, EvaluateArgs, GenArgs, RefineArgs};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "slr",
    version,
    about = "Sparse plus low-rank decomposition of linear layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic layer (or toy block stack), calibration
    /// activations and a manifest.
    Gen(GenArgs),
    /// Decompose one layer into S + ABᵀ.
    Decompose(DecomposeArgs),
    /// Jointly refine a decomposed block against its dense original.
    RefineTm(RefineArgs),
    /// Compress a stack of blocks in order, propagating compressed outputs.
    Cascade(CascadeArgs),
    /// Print objective, relative output error, sparsity, rank and pattern
    /// validity of a decomposition as JSON.
    Evaluate(EvaluateArgs),
    /// Objective-versus-iteration CSV for several methods on one layer.
    Bench(BenchArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Decompose(a) => commands::decompose_cmd(&a),
        Command::RefineTm(a) => commands::refine_tm(&a),
        Command::Cascade(a) => commands::cascade(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Bench(a) => commands::bench(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
