use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use commands::{BenchmarkArgs, FitArgs, PredictArgs, SimulateArgs};

/// Spatio-temporal prediction with an estimated inner-product mean plus
/// kriging of the residual random effect.
///
/// Exit codes: 1 for I/O and file-format errors, 2 for invalid
/// configuration, 3 for numerical failures.
#[derive(Debug, Parser)]
#[command(name = "pdeplus", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a simulated dataset and its ground truth.
    Simulate(SimulateArgs),
    /// Fit a model and write it with diagnostics and plot data.
    Fit(FitArgs),
    /// Predict at query locations and times from a fitted model.
    Predict(PredictArgs),
    /// Score PDE+, the naive mean and ordinary kriging over replicates.
    Benchmark(BenchmarkArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => commands::simulate(args),
        Command::Fit(args) => commands::fit(args),
        Command::Predict(args) => commands::predict(args),
        Command::Benchmark(args) => commands::benchmark(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
