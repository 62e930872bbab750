use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use serde_json::json;

use delayline::cli::{run, Command, Options};

#[derive(Parser, Debug)]
#[command(name = "delayline", version, about = "Open quantum systems with delayed coherent feedback")]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for CSV files and the JSON sidecar.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Integration tolerance, overriding the config.
    #[arg(long)]
    tol: Option<f64>,
    /// Refuse plans needing more intervals than this.
    #[arg(long)]
    max_intervals: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Evolve,
    Correlate,
    G2,
    Oracle,
    Teleport,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let err = json!({ "error": { "kind": "usage", "message": e.to_string().trim_end(), "exit_code": 2 } });
            eprintln!("{err}");
            return ExitCode::from(2);
        }
    };
    let command = match args.command {
        Cmd::Evolve => Command::Evolve,
        Cmd::Correlate => Command::Correlate,
        Cmd::G2 => Command::G2,
        Cmd::Oracle => Command::Oracle,
        Cmd::Teleport => Command::Teleport,
    };
    let opts = Options { config: args.config, out: args.out, tol: args.tol, max_intervals: args.max_intervals };
    match run(command, &opts) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
