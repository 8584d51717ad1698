mod analyze;
mod bounds;
mod failure;
mod output;
mod toy;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use failure::CliResult;

/// Mutual-information peaks in reasoning traces: analysis, bound checks and
/// toy-model interventions. Exit codes: 0 ok, 2 input error, 3 insufficient
/// data, 4 bound violation, 5 training divergence.
#[derive(Debug, Parser)]
#[command(name = "mipeaks", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute MI trajectories and peak statistics for MITC trace files.
    Analyze(analyze::AnalyzeArgs),
    /// Verify the error bounds on random discrete joints.
    Bounds {
        #[command(subcommand)]
        command: bounds::BoundsCommand,
    },
    /// Train the toy transformer and run intervention experiments.
    Toy {
        #[command(subcommand)]
        command: toy::ToyCommand,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Analyze(args) => analyze::run(&args),
        Command::Bounds { command } => bounds::run(&command),
        Command::Toy { command } => toy::run(&command),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
