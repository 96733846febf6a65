use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = daem_cli::Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match daem_cli::run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
