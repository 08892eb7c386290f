use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = hapi_review::cli::Cli::parse();
    match hapi_review::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
