use std::process::ExitCode;

use dove::cli::{run, CliError};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> ExitCode {
    match run(std::env::args_os()) {
        Ok(report) => {
            print!("{report}");
            ExitCode::from(report.exit_code as u8)
        }
        Err(CliError::Usage(e)) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("dove: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
