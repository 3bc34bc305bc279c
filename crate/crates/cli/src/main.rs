use std::process::ExitCode;

use clap::Parser;
use icl_cli::commands::Command;

#[derive(Debug, Parser)]
#[command(name = "icl", version, about = "Instance coloring: generation, optimization, prompting and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ICL_LOG", "info")).init();
    let cli = Cli::parse();
    match cli.command.run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
