//! `gcl` — run continual-learning experiment grids from a JSON config.
//!
//! Exit codes: 0 on success, 2 for configuration or input problems, 1 for
//! runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gcl_core::experiment;

#[derive(Parser)]
#[command(
    name = "gcl",
    version,
    about = "Continual node classification on graph task streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full strategy x seed grid from a config file.
    Run {
        /// Experiment config (JSON).
        config: PathBuf,
    },
    /// Re-run the grid for each value of one hyperparameter.
    Sweep {
        /// Experiment config (JSON).
        config: PathBuf,
        /// One of: lambda, M, ema_beta, gamma.
        #[arg(long)]
        param: String,
        /// Comma-separated values; defaults to 0.01,0.1,0.5 for lambda.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config } => experiment::run(&config),
        Command::Sweep {
            config,
            param,
            values,
        } => {
            let values = match values {
                Some(v) => v,
                None if param == "lambda" => vec![0.01, 0.1, 0.5],
                None => {
                    eprintln!("error: --values is required for param {param:?}");
                    return ExitCode::from(2);
                }
            };
            experiment::sweep(&config, &param, &values)
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(experiment::exit_code_for(&err) as u8)
        }
    }
}
