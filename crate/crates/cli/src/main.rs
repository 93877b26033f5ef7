use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = hgda_cli::Cli::parse();
    match hgda_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
