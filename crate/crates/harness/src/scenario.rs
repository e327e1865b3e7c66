//! Scenario scripts: timed control actions run against traffic.
//!
//! ```toml
//! end_ns = 2_000_000_000
//! collect_every_ns = 100_000_000
//!
//! [traffic]
//! seed = 7
//! n_flows = 200
//!
//! [[action]]
//! at = 1_000_000_000
//! op = "install_probe"
//! device = 1
//! spec = { kind = { type = "counter" }, attach = { type = "port_ingress", port = 1 } }
//!
//! [[action]]
//! at = 1_500_000_000
//! op = "read_counter"
//! device = 1
//! counter = 0
//! ```
//!
//! Actions run at their virtual time before any packet event at that time.
//! After the last action the network drains: packets still queued or on a
//! link are delivered, timers stop.
//! A failing action is logged in the timeline and the run continues.

use dnp_controller::Query;
use dnp_core::ids::{CounterId, DeviceId, ProbeId};
use dnp_core::probe::ProbeSpec;
use dnp_proto::Message;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netspec::NetSpec;
use crate::sim::{ExperimentRecord, SimNetwork};
use crate::traffic::{TracePacket, TrafficProfile};
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("line {line}: unknown action `{name}`")]
    UnknownAction { line: usize, name: String },
    #[error("action {index}: time {at} outside traffic span 0..={end}")]
    BadTime { index: usize, at: u64, end: u64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ActionKind {
    InstallProbe { device: DeviceId, spec: ProbeSpec },
    RevokeProbe { device: DeviceId, probe: u32, #[serde(default)] force: bool },
    RunQuery { query: Query },
    RevokeQuery { id: u32 },
    ReadCounter { device: DeviceId, counter: u32 },
    Collect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub at: u64,
    #[serde(flatten)]
    pub kind: ActionKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub end_ns: Option<u64>,
    #[serde(default)]
    pub collect_every_ns: Option<u64>,
    #[serde(default)]
    pub traffic: Option<TrafficProfile>,
    #[serde(default, rename = "action")]
    pub actions: Vec<Action>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl Script {
    pub fn from_toml(text: &str) -> Result<Self, ScriptError> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(0);
            let msg = e.message().to_string();
            match msg.strip_prefix("unknown variant `").and_then(|r| r.split('`').next()) {
                Some(name) => ScriptError::UnknownAction { line, name: name.to_string() },
                None => ScriptError::Parse { line, msg },
            }
        })
    }

    /// Checks every action time against the traffic span.
    pub fn validate(&self, end: u64) -> Result<(), ScriptError> {
        for (index, a) in self.actions.iter().enumerate() {
            if a.at > end {
                return Err(ScriptError::BadTime { index, at: a.at, end });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrafficSource {
    Profile(TrafficProfile),
    Trace { seed: u64, packets: Vec<TracePacket> },
}

impl TrafficSource {
    pub fn seed(&self) -> u64 {
        match self {
            TrafficSource::Profile(p) => p.seed,
            TrafficSource::Trace { seed, .. } => *seed,
        }
    }

    pub fn packets(&self) -> Vec<TracePacket> {
        match self {
            TrafficSource::Profile(p) => p.generate().1,
            TrafficSource::Trace { packets, .. } => packets.clone(),
        }
    }
}

fn execute(net: &mut SimNetwork, a: &ActionKind) -> Result<String, HarnessError> {
    let now = net.now();
    Ok(match a {
        ActionKind::InstallProbe { device, spec } => {
            match net.ctl.call(*device, Message::ProbeInstall { spec: spec.clone() })? {
                Message::ProbeInstalled { probe, .. } => format!("probe {}", probe.0),
                m => format!("unexpected {}", m.name()),
            }
        }
        ActionKind::RevokeProbe { device, probe, force } => {
            net.ctl.call(*device, Message::ProbeRevoke { probe: ProbeId(*probe), force: *force })?;
            "revoked".into()
        }
        ActionKind::RunQuery { query } => format!("query {}", net.ctl.deploy(query, now)?),
        ActionKind::RevokeQuery { id } => {
            net.ctl.collect(now)?;
            let rs = net.ctl.revoke_query(*id)?;
            net.record.results.extend(rs.rows.iter().map(|r| dnp_controller::RowRecord {
                query: *id,
                ts: r.ts,
                device: r.device,
                probe: r.probe,
                fields: r.fields.clone(),
                value: r.value,
            }));
            format!("{} rows", rs.rows.len())
        }
        ActionKind::ReadCounter { device, counter } => {
            match net.ctl.call(*device, Message::ReadCounterReq { counter: CounterId(*counter) })? {
                Message::ReadCounterReply { value, .. } => format!("value {value}"),
                m => format!("unexpected {}", m.name()),
            }
        }
        ActionKind::Collect => format!("{} rows", net.ctl.collect(now)?),
    })
}

fn describe(a: &ActionKind) -> String {
    match a {
        ActionKind::InstallProbe { device, spec } => format!("install_probe d{device} {}", spec.kind.name()),
        ActionKind::RevokeProbe { device, probe, .. } => format!("revoke_probe d{device} {probe}"),
        ActionKind::RunQuery { query } => format!("run_query {}", query.id),
        ActionKind::RevokeQuery { id } => format!("revoke_query {id}"),
        ActionKind::ReadCounter { device, counter } => format!("read_counter d{device} c{counter}"),
        ActionKind::Collect => "collect".into(),
    }
}

/// Runs `traffic` through a fresh network built from `spec`, applying the
/// script's actions at their times.
pub fn run_scenario(spec: &NetSpec, traffic: &TrafficSource, script: &Script) -> Result<ExperimentRecord, HarnessError> {
    let pkts = traffic.packets();
    let last = pkts.last().map(|p| p.ts).unwrap_or(0);
    let end = script.end_ns.unwrap_or(last).max(last);
    script.validate(end)?;

    let mut net = SimNetwork::new(spec)?;
    net.record.seed = traffic.seed();
    net.inject(&pkts);

    let mut steps: Vec<(u64, usize, Option<&ActionKind>)> =
        script.actions.iter().enumerate().map(|(i, a)| (a.at, i, Some(&a.kind))).collect();
    if let Some(every) = script.collect_every_ns.filter(|e| *e > 0) {
        let n = script.actions.len();
        steps.extend((1..=end / every).map(|k| (k * every, n, None)));
    }
    steps.sort_by_key(|s| (s.0, s.1));

    for (at, _, step) in steps {
        net.run_before(at);
        match step {
            Some(a) => {
                let outcome = execute(&mut net, a).unwrap_or_else(|e| format!("error: {e}"));
                net.log(describe(a), outcome);
            }
            None => {
                net.ctl.collect(at)?;
            }
        }
    }
    net.run_through(end);
    net.drain();
    let now = net.now();
    net.ctl.collect(now)?;
    Ok(net.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_action_names_its_line() {
        let text = "[[action]]\nat = 1\nop = \"collect\"\n\n[[action]]\nat = 2\nop = \"explode\"\n";
        match Script::from_toml(text) {
            Err(ScriptError::UnknownAction { line, name }) => {
                assert_eq!(name, "explode");
                assert!((5..=7).contains(&line), "line {line}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn action_past_traffic_is_rejected() {
        let s = Script { actions: vec![Action { at: 10, kind: ActionKind::Collect }], ..Default::default() };
        assert_eq!(s.validate(5), Err(ScriptError::BadTime { index: 0, at: 10, end: 5 }));
        let tr = TrafficSource::Trace { seed: 0, packets: vec![] };
        assert!(matches!(run_scenario(&NetSpec::line(1, 0), &tr, &s), Err(HarnessError::Script(_))));
    }

    #[test]
    fn parses_probe_install() {
        let text = r#"
            end_ns = 100
            [traffic]
            seed = 3
            n_flows = 2
            [[action]]
            at = 5
            op = "install_probe"
            device = 1
            spec = { kind = { type = "counter" }, attach = { type = "port_ingress", port = 1 } }
        "#;
        let s = Script::from_toml(text).unwrap();
        assert_eq!(s.traffic.as_ref().unwrap().seed, 3);
        assert!(matches!(s.actions[0].kind, ActionKind::InstallProbe { device: 1, .. }));
    }
}
