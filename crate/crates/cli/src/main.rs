use std::process::ExitCode;

use clap::Parser;
use mvsde::{execute, Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(cli.command)),
            Err(e) => Err(CliError::Invalid(format!("--workers {n}: {e}"))),
        },
        None => execute(cli.command),
    };
    match result {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
