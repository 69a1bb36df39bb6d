use std::process::ExitCode;

use clap::Parser;
use d2t_cli::{error_record, run, threads_from_env, Cli};
use d2t_core::parallel::with_threads;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_record("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    let result = threads_from_env().and_then(|n| with_threads(n, || run(&cli)));
    match result {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
