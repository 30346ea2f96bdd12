use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use orthant_cli::commands::EXIT_VALIDATION;
use orthant_cli::output::{write_json, SCHEMA_VERSION};
use orthant_cli::{load_config, run, Command};

#[derive(Clone, Copy, ValueEnum)]
enum Cmd {
    Simulate,
    SolveDiscounted,
    SolveErgodic,
    ProbeRecurrence,
    Verify,
    Suite,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::SolveDiscounted => Command::SolveDiscounted,
            Cmd::SolveErgodic => Command::SolveErgodic,
            Cmd::ProbeRecurrence => Command::ProbeRecurrence,
            Cmd::Verify => Command::Verify,
            Cmd::Suite => Command::Suite,
        }
    }
}

/// Risk-sensitive control of reflected diffusions in the orthant.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(value_enum)]
    command: Cmd,
    /// Configuration file (`key = value` lines under section headers).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `run.out`, then `runs/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let command = Command::from(args.command);
    let mut cfg = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            if let Some(out) = &args.out {
                let err = serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "command": command.as_str(),
                    "kind": "validation",
                    "message": e.to_string(),
                });
                let _ = write_json(&out.join("error.json"), &err);
            }
            return ExitCode::from(EXIT_VALIDATION as u8);
        }
    };
    if let Some(c) = cfg.run.command {
        if c != command {
            eprintln!("run.command: config is for `{c}`, invoked as `{command}`");
            return ExitCode::from(EXIT_VALIDATION as u8);
        }
    }
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    let out = args
        .out
        .or_else(|| cfg.run.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(command.as_str()));
    let outcome = run(&cfg, command, &out);
    ExitCode::from(outcome.exit_code as u8)
}
