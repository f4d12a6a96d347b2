//! `knowmem` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
//! 4 numeric error.

mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "knowmem",
    version,
    about = "Memory-augmented text classification experiments"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(commands::SynthArgs),
    /// Train one or all cross-validation folds.
    Train(commands::TrainArgs),
    /// Evaluate trained folds and write metric reports and traces.
    Eval(commands::EvalArgs),
    /// Memory metrics over a range of thresholds and cut-offs.
    Sweep(commands::SweepArgs),
    /// Combine aggregate reports of several runs.
    Report(commands::ReportArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<knowmem::Error>() {
            return match e {
                knowmem::Error::Config(_) => 2,
                knowmem::Error::Data(_) | knowmem::Error::Io { .. } | knowmem::Error::Json { .. } => 3,
                knowmem::Error::Numeric { .. } | knowmem::Error::Divergence { .. } => 4,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
