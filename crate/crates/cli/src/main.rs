//! `motron`: synthesize data, train, predict and evaluate.

mod data;
mod eval;
mod manifest;
mod predict;
mod synth;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "motron", version, about = "Probabilistic motion forecasting on SO(3)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a known distribution.
    Synth(synth::SynthArgs),
    /// Fit a model to a dataset directory.
    Train(train::TrainArgs),
    /// Forecast from one observed motion.
    Predict(predict::PredictArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(eval::EvalArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOTRON_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Train(a) => train::run(a),
        Command::Predict(a) => predict::run(a),
        Command::Eval(a) => eval::run(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
