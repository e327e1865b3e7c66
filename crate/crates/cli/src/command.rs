//! Command grammar. One line is one command; `#` starts a comment.

use std::path::PathBuf;

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Parser, Subcommand};
use dnp_core::ids::DeviceId;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Parser)]
#[command(no_binary_name = true, disable_version_flag = true, name = "", override_usage = "<COMMAND> [ARGS]")]
pub struct Line {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum Command {
    /// Network topology.
    Topo {
        #[command(subcommand)]
        op: TopoOp,
    },
    /// Devices of the loaded network.
    Dev {
        #[command(subcommand)]
        op: DevOp,
    },
    /// Probe install, revoke and listing.
    Probe {
        #[command(subcommand)]
        op: ProbeOp,
    },
    /// Network-wide queries.
    Query {
        #[command(subcommand)]
        op: QueryOp,
    },
    /// Resource pool occupancy per class.
    Pools {
        #[arg(long, value_parser = device_id)]
        device: Option<DeviceId>,
    },
    /// Value of one pool counter.
    ReadCounter {
        #[arg(long, value_parser = device_id)]
        device: DeviceId,
        /// `c4` or `4`.
        #[arg(value_parser = |s: &str| prefixed("c", s))]
        counter: u32,
    },
    /// Records of one state table.
    StbDump {
        #[arg(long, value_parser = device_id)]
        device: DeviceId,
        /// `t2` or `2`.
        #[arg(value_parser = |s: &str| prefixed("t", s))]
        table: u32,
    },
    /// Scripted experiment over the loaded topology.
    Scenario {
        #[command(subcommand)]
        op: ScenarioOp,
    },
    /// Forwarding throughput against counters per packet.
    Bench {
        /// Comma-separated probe counts.
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2, 4, 8, 16, 32, 64])]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 40)]
        window_ms: u64,
        #[arg(long, default_value_t = 3)]
        runs: usize,
    },
    /// Advances virtual time and collects pending reports.
    Advance {
        #[arg(value_parser = duration_ns)]
        by: u64,
    },
    /// Result rows of every query, or the raw report log.
    DumpReportLog {
        #[arg(long)]
        query: Option<u32>,
        #[arg(long)]
        raw: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum TopoOp {
    Load { file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum DevOp {
    List,
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum ProbeOp {
    /// Installs a probe spec file (TOML, or JSON by extension).
    Install {
        file: PathBuf,
        #[arg(long, value_parser = device_id)]
        device: DeviceId,
    },
    Revoke {
        #[arg(value_parser = |s: &str| prefixed("probe", s))]
        probe: u32,
        #[arg(long, value_parser = device_id)]
        device: DeviceId,
        #[arg(long)]
        force: bool,
    },
    List {
        #[arg(long, value_parser = device_id)]
        device: Option<DeviceId>,
    },
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum QueryOp {
    /// Deploys a query file (TOML, or JSON by extension).
    Run { file: PathBuf },
    Revoke { id: u32 },
    List,
}

#[derive(Debug, Clone, PartialEq, Subcommand)]
pub enum ScenarioOp {
    Run {
        script: PathBuf,
        /// Recorded trace replacing the script's generated traffic.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

/// `d3` or `3`.
pub fn device_id(s: &str) -> Result<DeviceId, String> {
    prefixed("d", s)
}

/// A number, optionally behind its display prefix.
pub fn prefixed(prefix: &str, s: &str) -> Result<u32, String> {
    s.strip_prefix(prefix).unwrap_or(s).parse().map_err(|_| format!("`{s}` is not an id"))
}

/// Nanoseconds, with an optional `ns`, `us`, `ms` or `s` suffix.
pub fn duration_ns(s: &str) -> Result<u64, String> {
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num.parse().map_err(|_| format!("`{s}` is not a duration"))?;
    let mul = match unit {
        "" | "ns" => 1,
        "us" => 1_000,
        "ms" => 1_000_000,
        "s" => 1_000_000_000,
        _ => return Err(format!("unknown unit `{unit}` in `{s}`")),
    };
    n.checked_mul(mul).ok_or_else(|| format!("`{s}` overflows"))
}

/// Words of a line with the comment removed. None for a blank line.
pub fn words(text: &str) -> Option<Vec<&str>> {
    let text = text.split('#').next().unwrap_or("");
    let w: Vec<&str> = text.split_whitespace().collect();
    (!w.is_empty()).then_some(w)
}

fn hint(e: &clap::Error) -> Option<String> {
    let suggested = |k| match e.get(k) {
        Some(ContextValue::String(s)) => Some(s.clone()),
        Some(ContextValue::Strings(v)) if !v.is_empty() => Some(v.join(", ")),
        _ => None,
    };
    if let Some(s) = suggested(ContextKind::SuggestedSubcommand) {
        return Some(format!("did you mean `{s}`?"));
    }
    if let Some(s) = suggested(ContextKind::SuggestedArg) {
        return Some(format!("did you mean `{s}`?"));
    }
    if let Some(s) = suggested(ContextKind::ValidSubcommand) {
        return Some(format!("expected one of: {s}"));
    }
    match e.kind() {
        ErrorKind::MissingSubcommand | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            Some("append `help` to list the subcommands".into())
        }
        _ => None,
    }
}

/// Parses one line. `Ok(None)` for blank and comment lines; help requests
/// come back as `CliError::Help`.
pub fn parse_line(n: usize, text: &str) -> Result<Option<Command>, CliError> {
    let Some(w) = words(text) else { return Ok(None) };
    match Line::try_parse_from(w) {
        Ok(l) => Ok(Some(l.cmd)),
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp) => Err(CliError::Help(e.render().to_string())),
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            Err(CliError::Parse { line: n, msg: first, hint: hint(&e) })
        }
    }
}
