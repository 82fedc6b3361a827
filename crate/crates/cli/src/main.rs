//! `fencepipe` command-line front end.
//!
//! Every subcommand prints one JSON document on stdout. Exit status is 0 on
//! success, 1 for data errors and 2 for configuration or usage errors.

mod args;
mod commands;
mod dataset;

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use serde_json::{json, Value};

use args::{Cli, Command};

/// Result of a command: the JSON to print and whether it counts as success.
pub struct Outcome {
    pub json: Value,
    pub ok: bool,
}

impl Outcome {
    pub fn ok(json: Value) -> Self {
        Self { json, ok: true }
    }
}

/// Prints to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let result = match cli.command {
        Command::GenSynth(a) => commands::gen_synth(&a),
        Command::Slice(a) => commands::slice(&a),
        Command::ImportAnnotations(a) => commands::import_annotations(&a),
        Command::Augment(a) => commands::augment(&a),
        Command::Split(a) => commands::split(&a),
        Command::TrainSeg(a) => commands::train_seg(&a),
        Command::TrainCls(a) => commands::train_cls(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(out) => {
            emit(&serde_json::to_string_pretty(&out.json).expect("JSON output serializes"));
            ExitCode::from(if out.ok { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            let kind = if e.is_config() { "config" } else { "data" };
            let doc = json!({"status": "error", "kind": kind, "message": e.to_string()});
            emit(&doc.to_string());
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
