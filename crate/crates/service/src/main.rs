use std::process::ExitCode;

use clap::Parser;
use forgedit_service::cli::{run, Cli};

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let contract = e.downcast_ref::<forgedit::Error>().is_some_and(forgedit::Error::is_contract);
            ExitCode::from(if contract { 2 } else { 1 })
        }
    }
}
