//! `bonnet`: phantom generation, preprocessing, training, inference,
//! evaluation and benchmarking for sparse CT bone segmentation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error.

mod bench;
mod dataset;
mod eval;
mod infer;
mod manifest;
mod phantom;
mod preprocess;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bonnet", version, about = "Sparse voxel CT bone segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a deterministic set of labeled synthetic phantoms.
    Phantom(phantom::Args),
    /// Threshold a CT volume and write its sparse cache.
    Preprocess(preprocess::Args),
    /// Train a network on a phantom dataset.
    Train(train::Args),
    /// Segment a volume with a trained checkpoint.
    Infer(infer::Args),
    /// Per-group hard Dice between a prediction and a ground-truth mask.
    Eval(eval::Args),
    /// Time sparse and dense inference on one volume.
    Bench(bench::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are reported through the error path too.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Phantom(args) => phantom::run(args),
        Command::Preprocess(args) => preprocess::run(args),
        Command::Train(args) => train::run(args),
        Command::Infer(args) => infer::run(args),
        Command::Eval(args) => eval::run(args),
        Command::Bench(args) => bench::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
