use clap::Parser;
use slick_cli::{run, Cli, CliError};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        match &e {
            CliError::Other(err) => eprintln!("error: {err:#}"),
            other => eprintln!("error: {other}"),
        }
        std::process::exit(e.exit_code());
    }
}
