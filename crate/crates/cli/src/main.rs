mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use signdelta::ErrorCategory;

use commands::Cli;

const THREADS_VAR: &str = "SIGNDELTA_THREADS";

fn exit_code(err: &anyhow::Error) -> u8 {
    let category = err
        .chain()
        .find_map(|e| e.downcast_ref::<signdelta::Error>())
        .map(signdelta::Error::category);
    match category {
        Some(ErrorCategory::BadInput) => 2,
        Some(ErrorCategory::Incompatible) => 3,
        Some(ErrorCategory::Internal) | None => 1,
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| signdelta::Error::Invalid(format!("{THREADS_VAR}={raw} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| commands::run(cli, &argv));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
