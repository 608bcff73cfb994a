use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = ciret::cli::Cli::parse();
    match ciret::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
