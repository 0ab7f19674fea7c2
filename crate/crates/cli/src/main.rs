mod config;
mod data_cmd;
mod error;
mod eval_cmd;
mod grid_cmd;
mod output;
mod train_cmd;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::Result;

/// Neural Bayes: manifold learning and mutual information maximization
/// with neural posterior estimates.
///
/// Seeds default to the NB_SEED environment variable, then 0.
#[derive(Parser, Debug)]
#[command(name = "neural-bayes", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic 2-D dataset, optionally lifted to more dimensions.
    GenData(data_cmd::GenDataArgs),
    /// Train a network to split a dataset into its manifolds.
    TrainDml(train_cmd::TrainDmlArgs),
    /// Train an encoder by maximizing mutual information with its inputs.
    TrainMim(train_cmd::TrainMimArgs),
    /// Fit a classifier on frozen features of a trained encoder.
    Probe(eval_cmd::ProbeArgs),
    /// Compare analytic gradients and closed forms against reference values.
    Gradcheck(eval_cmd::GradcheckArgs),
    /// Write predicted labels over a grid covering a 2-D dataset.
    ExportGrid(grid_cmd::ExportGridArgs),
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => data_cmd::run_gen_data(a),
        Command::TrainDml(a) => train_cmd::run_train_dml(a),
        Command::TrainMim(a) => train_cmd::run_train_mim(a),
        Command::Probe(a) => eval_cmd::run_probe(a),
        Command::Gradcheck(a) => eval_cmd::run_gradcheck(a),
        Command::ExportGrid(a) => grid_cmd::run_export_grid(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
