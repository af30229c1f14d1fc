use std::process::ExitCode;

use clap::Parser;
use squeezesim::cli::{init_logging, run, Cli, Outcome, EXIT_CHECKS_FAILED};

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(EXIT_CHECKS_FAILED),
        Err(e) => {
            eprintln!("squeezesim: {e}");
            ExitCode::FAILURE
        }
    }
}
