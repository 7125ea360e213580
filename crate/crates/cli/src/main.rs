//! `qnetlab`: experiment runner.
//!
//! Exit codes: 0 on success, 2 when the arguments are invalid (nothing is
//! computed), 1 when a run fails.

mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Failure;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(threads) = cli.global.threads {
        if threads == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::Internal(e.into()))?;
    }
    match &cli.command {
        Command::Sweep(a) => commands::sweep(&cli.global, a),
        Command::PmDist(a) => commands::pm_dist(&cli.global, a),
        Command::Protocol(a) => commands::protocol(&cli.global, a),
        Command::Noise(a) => commands::noise(&cli.global, a),
    }
}
