use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    ExitCode::from(zorefine::cli::run(zorefine::cli::Cli::parse()))
}
