//! `splitwire` command-line entry point.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 infeasible plan,
//! 4 I/O error (including refused connections and timeouts), 5 protocol error.

mod commands;
mod error;
mod input;
mod output;

use clap::{Parser, Subcommand};
use commands::Global;
use error::exit;
use output::Format;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "splitwire", version, about = "Split inference over a noisy link")]
struct Cli {
    /// Seed for random weights, inputs and channel noise.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Directory for output files and the run manifest.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Stdout format.
    #[arg(long, global = true, value_enum, default_value = "text")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-side FLOPs and parameters of a split model.
    Profile(commands::ProfileArgs),
    /// Normalized computation cost over beta, or minimum n_c over an accuracy table.
    Sweep(commands::SweepArgs),
    /// Run encoder, channel and decoder locally.
    Simulate(commands::SimulateArgs),
    /// Pick the cheapest split and n_c meeting an accuracy floor.
    Plan(commands::PlanArgs),
    /// Run the receiver half as a TCP server.
    Serve(commands::ServeArgs),
    /// Run the transmitter half against a server.
    Send(commands::SendArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    let global = Global {
        seed: cli.seed,
        output_dir: cli.output_dir,
        format: cli.format,
    };
    let result = match &cli.command {
        Command::Profile(a) => commands::profile(&global, a),
        Command::Sweep(a) => commands::sweep(&global, a),
        Command::Simulate(a) => commands::simulate(&global, a),
        Command::Plan(a) => commands::plan(&global, a),
        Command::Serve(a) => commands::serve(&global, a),
        Command::Send(a) => commands::send(&global, a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
