use clap::Parser;
use frm_cli::args::Cli;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match frm_cli::commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("frm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
