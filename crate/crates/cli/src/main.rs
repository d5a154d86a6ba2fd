//! `memefusion` command-line tool.
//!
//! Every command prints line-oriented `key=value` output on stdout; logs go
//! to stderr. Exit codes: 0 ok, 2 usage or config, 3 training abort,
//! 4 artifact corruption or incompatibility, 5 undecodable input.

mod commands;

use std::process::ExitCode;

use clap::Parser;
use memefusion_core::Error;

use commands::Cli;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Argument(_) | Error::DatasetNotFound(_) | Error::UndefinedMetric(_) => 2,
        Error::Diverged { .. } => 3,
        Error::Corruption { .. } | Error::WeightLoad { .. } | Error::Compatibility(_) => 4,
        Error::ImageDecode { .. } | Error::Parse { .. } | Error::LabelScheme(_) => 5,
        Error::Vocabulary { .. } | Error::Shape(_) | Error::Io(_) | Error::Json(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
