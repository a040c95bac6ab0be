use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use vspw_cli::{dispatch, exit_code, CheckFailed, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            if stdout
                .write_all(out.as_bytes())
                .and_then(|_| stdout.flush())
                .is_err()
            {
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let Some(f) = e.downcast_ref::<CheckFailed>() {
                print!("{}", f.stdout);
            }
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
