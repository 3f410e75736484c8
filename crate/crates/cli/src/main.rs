use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use tan2d_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tan2d {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
