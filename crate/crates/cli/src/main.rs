mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use striplyap_core::Error;

use args::{Cli, Command};

const EXIT_USAGE: u8 = 64;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Model(#[from] Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Model(Error::ParabolicChannel { .. } | Error::OutsideSpectrum { .. }) => commands::EXIT_REJECTED,
            CliError::Model(Error::InvalidArgument(_)) => EXIT_USAGE,
            _ => 1,
        }
    }
}

fn configure_threads() {
    let Ok(value) = std::env::var("STRIPLYAP_THREADS") else { return };
    match value.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("striplyap: could not configure {n} threads: {e}");
            }
        }
        _ => eprintln!("striplyap: ignoring STRIPLYAP_THREADS={value:?}"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    configure_threads();
    let result = match &cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::Estimate(a) => commands::estimate(a),
        Command::Compare(a) => commands::compare(a),
        Command::Verify(a) => commands::verify(a),
        Command::Meanfield(a) => commands::meanfield(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("striplyap: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
