//! Operator shell: a REPL and batch runner over a simulated network.

pub mod command;
pub mod record;
pub mod shell;

use std::io::{BufRead, Write};

pub use command::{parse_line, Command};
pub use record::{ErrorInfo, Record};
pub use shell::{Output, Shell};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CliError {
    #[error("line {line}: {msg}{}", hint.as_ref().map(|h| format!(" ({h})")).unwrap_or_default())]
    Parse { line: usize, msg: String, hint: Option<String> },
    #[error("{msg}{}", code.map(|c| format!(" [code {c}]")).unwrap_or_default())]
    Command { code: Option<u16>, msg: String },
    #[error("{0}")]
    Help(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse { .. } => EXIT_USAGE,
            CliError::Command { .. } => EXIT_FAILED,
            CliError::Help(_) => EXIT_OK,
        }
    }
}

fn exit_code(r: &Record) -> u8 {
    match &r.error {
        None => EXIT_OK,
        Some(e) if e.kind == "parse" => EXIT_USAGE,
        Some(_) => EXIT_FAILED,
    }
}

fn emit(out: &mut impl Write, json: bool, rec: &Record, text: &str) -> std::io::Result<()> {
    if json {
        writeln!(out, "{}", serde_json::to_string(rec).expect("records serialize"))
    } else if rec.ok {
        if text.is_empty() {
            Ok(())
        } else {
            writeln!(out, "{text}")
        }
    } else {
        writeln!(out, "error: {text}")
    }
}

/// Runs every line of `script` in order and stops at the first failure.
/// Returns the exit code.
pub fn batch(shell: &mut Shell, script: &str, json: bool, out: &mut impl Write) -> std::io::Result<u8> {
    for (i, line) in script.lines().enumerate() {
        let Some((rec, text)) = shell.run_line(i + 1, line) else { continue };
        emit(out, json, &rec, &text)?;
        let code = exit_code(&rec);
        if code != EXIT_OK {
            return Ok(code);
        }
    }
    Ok(EXIT_OK)
}

/// Reads commands until end of input; failures are printed and the loop
/// goes on. Returns the exit code of the last command.
pub fn repl(shell: &mut Shell, input: impl BufRead, json: bool, prompt: bool, out: &mut impl Write) -> std::io::Result<u8> {
    let mut last = EXIT_OK;
    let mut n = 0;
    if prompt {
        write!(out, "dnp> ")?;
        out.flush()?;
    }
    for line in input.lines() {
        let line = line?;
        n += 1;
        if matches!(line.trim(), "quit" | "exit") {
            break;
        }
        if let Some((rec, text)) = shell.run_line(n, &line) {
            emit(out, json, &rec, &text)?;
            last = exit_code(&rec);
        }
        if prompt {
            write!(out, "dnp> ")?;
            out.flush()?;
        }
    }
    Ok(last)
}
