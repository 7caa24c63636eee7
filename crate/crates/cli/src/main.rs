use clap::Parser;
use fsc_cli::{Cli, CliError, Stage};

fn main() {
    let json_errors = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return;
        }
        Err(e) => {
            if json_errors {
                let err = CliError::validation(Stage::Args, e.kind().to_string());
                eprintln!("{}", err.to_json());
            } else {
                eprint!("{e}");
            }
            std::process::exit(2);
        }
    };
    match fsc_cli::run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            if cli.common.json_errors {
                eprintln!("{}", e.to_json());
            } else {
                eprintln!("error: {e}");
            }
            std::process::exit(e.exit_code());
        }
    }
}
