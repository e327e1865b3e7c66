use std::io::{self, IsTerminal};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use dnp_cli::{batch, repl, Shell, EXIT_FAILED, EXIT_USAGE};

/// Dynamic network probes on a simulated network.
#[derive(Parser)]
#[command(name = "dnp", version)]
struct Args {
    /// Network description to load first.
    #[arg(long)]
    topo: Option<PathBuf>,
    /// Traffic seed for scenarios, overriding the script's.
    #[arg(long)]
    seed: Option<u64>,
    /// One JSON record per command.
    #[arg(long)]
    json: bool,
    /// Command file to run in batch mode; without it commands are read
    /// from stdin.
    #[arg(long)]
    script: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let mut shell = Shell::new();
    shell.seed = args.seed;
    let mut out = io::stdout().lock();
    if let Some(t) = &args.topo {
        if let Err(e) = shell.load_topology(t) {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    }
    let code = match &args.script {
        Some(path) => {
            let text = match std::fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::from(EXIT_USAGE);
                }
            };
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                shell.base_dir = dir.to_path_buf();
            }
            batch(&mut shell, &text, args.json, &mut out)
        }
        None => {
            let stdin = io::stdin();
            let prompt = stdin.is_terminal() && !args.json;
            repl(&mut shell, stdin.lock(), args.json, prompt, &mut out)
        }
    };
    ExitCode::from(code.unwrap_or(EXIT_FAILED))
}
