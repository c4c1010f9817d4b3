//! `figrot` command-line entry point.
//!
//! Exit status is 0 on success, 2 for invocation problems and 1 for runtime
//! failures. Failures print one JSON object on stderr.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, UsageError};

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Filter(a) => commands::filter(a),
        Command::Stats(a) => commands::stats(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Analyze(a) => commands::analyze_cmd(a),
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Sweep(a) => commands::sweep(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = if e.is::<UsageError>() { (2, "usage") } else { (1, "runtime") };
            let line = serde_json::json!({ "error": format!("{e:#}"), "kind": kind });
            eprintln!("{line}");
            ExitCode::from(code)
        }
    }
}
