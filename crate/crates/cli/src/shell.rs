//! Command execution against one simulated network.

use std::path::{Path, PathBuf};
use std::time::Duration;

use dnp_controller::{Controller, ControllerError, Query};
use dnp_core::ids::{CounterId, DeviceId, ProbeId, StbId};
use dnp_core::probe::ProbeSpec;
use dnp_harness::{
    bench_throughput, read_trace, route_pipeline, run_scenario, BenchOpts, HarnessError, NetSpec, Script, SimNetwork,
    TrafficSource,
};
use dnp_proto::Message;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::command::*;
use crate::record::{table, wide, wide_vec, ErrorInfo, Record};
use crate::CliError;

/// Result of one command: machine data and its human rendering.
pub struct Output {
    pub data: Value,
    pub text: String,
}

impl Output {
    fn new(data: Value, text: impl Into<String>) -> Self {
        Output { data, text: text.into() }
    }
}

pub struct Shell {
    spec: Option<NetSpec>,
    net: Option<SimNetwork>,
    /// Traffic seed override for scenarios.
    pub seed: Option<u64>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl From<ControllerError> for CliError {
    fn from(e: ControllerError) -> Self {
        CliError::Command { code: e.device_code(), msg: e.to_string() }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Controller(c) => c.device_code(),
            _ => None,
        };
        CliError::Command { code, msg: e.to_string() }
    }
}

fn fail(msg: impl Into<String>) -> CliError {
    CliError::Command { code: None, msg: msg.into() }
}

fn unexpected(m: Message) -> CliError {
    fail(format!("unexpected reply {}", m.name()))
}

/// TOML, or JSON when the extension says so.
fn load_file<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|x| x == "json") {
        serde_json::from_str(&text).map_err(|e| fail(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| fail(format!("{}: {e}", path.display())))
    }
}

impl Default for Shell {
    fn default() -> Self {
        Shell { spec: None, net: None, seed: None, base_dir: PathBuf::from(".") }
    }
}

impl Shell {
    pub fn new() -> Self {
        Self::default()
    }

    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn net(&mut self) -> Result<&mut SimNetwork, CliError> {
        self.net.as_mut().ok_or_else(|| fail("no topology loaded; use `topo load <file>` or --topo"))
    }

    fn ctl(&mut self) -> Result<&mut Controller, CliError> {
        Ok(&mut self.net()?.ctl)
    }

    fn devices(&mut self, only: Option<DeviceId>) -> Result<Vec<DeviceId>, CliError> {
        let all = self.net()?.device_ids();
        match only {
            Some(d) if !all.contains(&d) => Err(fail(format!("no device {d}"))),
            Some(d) => Ok(vec![d]),
            None => Ok(all),
        }
    }

    pub fn load_topology(&mut self, file: &Path) -> Result<Output, CliError> {
        let spec = NetSpec::load(&self.path(file))?;
        let net = SimNetwork::new(&spec)?;
        let ids = net.device_ids();
        let data = json!({ "devices": ids, "links": spec.links.len() });
        self.spec = Some(spec);
        self.net = Some(net);
        Ok(Output::new(data, format!("{} devices, {} links", ids.len(), self.spec.as_ref().map_or(0, |s| s.links.len()))))
    }

    /// Runs one parsed command.
    pub fn execute(&mut self, cmd: &Command) -> Result<Output, CliError> {
        match cmd {
            Command::Topo { op: TopoOp::Load { file } } => self.load_topology(file),
            Command::Dev { op: DevOp::List } => self.dev_list(),
            Command::Probe { op } => self.probe(op),
            Command::Query { op } => self.query(op),
            Command::Pools { device } => self.pools(*device),
            Command::ReadCounter { device, counter } => {
                match self.ctl()?.call(*device, Message::ReadCounterReq { counter: CounterId(*counter) })? {
                    Message::ReadCounterReply { value, unit, ts } => {
                        Ok(Output::new(json!({ "value": value, "unit": unit, "ts": ts }), format!("{value} {unit:?} at {ts}")))
                    }
                    m => Err(unexpected(m)),
                }
            }
            Command::StbDump { device, table: t } => match self.ctl()?.call(*device, Message::StbDumpReq { table: StbId(*t) })? {
                Message::StbDumpReply { records } => {
                    let data = records
                        .iter()
                        .map(|r| json!({ "key": wide(r.key), "value": r.value, "insert_ts": r.insert_ts }))
                        .collect();
                    let rows: Vec<Vec<String>> =
                        records.iter().map(|r| vec![format!("{:#x}", r.key), r.value.to_string(), r.insert_ts.to_string()]).collect();
                    Ok(Output::new(Value::Array(data), table(&["key", "value", "insert_ts"], &rows)))
                }
                m => Err(unexpected(m)),
            },
            Command::Scenario { op: ScenarioOp::Run { script, trace } } => self.scenario(script, trace.as_deref()),
            Command::Bench { counts, window_ms, runs } => {
                let opts = BenchOpts { window: Duration::from_millis(*window_ms), runs: *runs, ..BenchOpts::route() };
                let curve = bench_throughput(&route_pipeline(1, &[1, 2]), counts, &opts)?;
                let data = serde_json::to_value(&curve).map_err(|e| fail(e.to_string()))?;
                Ok(Output::new(data, curve.to_csv().trim_end().to_string()))
            }
            Command::Advance { by } => {
                let net = self.net()?;
                let to = net.now().saturating_add(*by);
                net.run_through(to);
                let now = net.now();
                let n = net.ctl.collect(now)?;
                Ok(Output::new(json!({ "now": now, "collected": n }), format!("now {now}, {n} reports collected")))
            }
            Command::DumpReportLog { query, raw } => self.dump(*query, *raw),
        }
    }

    fn dev_list(&mut self) -> Result<Output, CliError> {
        let mut data = Vec::new();
        let mut rows = Vec::new();
        for d in self.devices(None)? {
            let ctl = self.ctl()?;
            let Message::FeaturesReply { ports, base_pps, budget, floor, .. } = ctl.call(d, Message::FeaturesReq)? else {
                return Err(fail("unexpected features reply"));
            };
            let Message::ProbeList { probes } = ctl.call(d, Message::ProbeListReq)? else {
                return Err(fail("unexpected probe list reply"));
            };
            let cost: u32 = probes.iter().map(|p| p.cost).sum();
            data.push(json!({ "device": d, "ports": ports, "probes": probes.len(), "probe_mem_accesses": cost,
                "base_pps": base_pps, "budget": budget, "floor": floor }));
            let ports: Vec<String> = ports.iter().map(u16::to_string).collect();
            rows.push(vec![format!("d{d}"), ports.join(","), probes.len().to_string(), cost.to_string(), format!("{floor:.0}")]);
        }
        Ok(Output::new(Value::Array(data), table(&["device", "ports", "probes", "mem_accesses", "floor_pps"], &rows)))
    }

    fn probe(&mut self, op: &ProbeOp) -> Result<Output, CliError> {
        match op {
            ProbeOp::Install { file, device } => {
                let spec: ProbeSpec = load_file(&self.path(file))?;
                match self.ctl()?.call(*device, Message::ProbeInstall { spec })? {
                    Message::ProbeInstalled { probe, handles, .. } => {
                        let hs: Vec<String> = handles.iter().map(|h| h.to_string()).collect();
                        Ok(Output::new(
                            json!({ "device": device, "probe": probe, "handles": handles }),
                            format!("{probe} on d{device} [{}]", hs.join(" ")),
                        ))
                    }
                    m => Err(unexpected(m)),
                }
            }
            ProbeOp::Revoke { probe, device, force } => {
                self.ctl()?.call(*device, Message::ProbeRevoke { probe: ProbeId(*probe), force: *force })?;
                Ok(Output::new(json!({ "device": device, "probe": probe }), format!("revoked {} on d{device}", ProbeId(*probe))))
            }
            ProbeOp::List { device } => {
                let mut data = Vec::new();
                let mut rows = Vec::new();
                for d in self.devices(*device)? {
                    let Message::ProbeList { probes } = self.ctl()?.call(d, Message::ProbeListReq)? else {
                        return Err(fail("unexpected probe list reply"));
                    };
                    for p in probes {
                        let hs: Vec<String> = p.handles.iter().map(|h| h.to_string()).collect();
                        rows.push(vec![
                            format!("d{d}"),
                            p.probe.to_string(),
                            p.spec.kind.name().to_string(),
                            hs.join(" "),
                            p.subscribers.len().to_string(),
                            p.cost.to_string(),
                        ]);
                        data.push(json!({ "device": d, "probe": p }));
                    }
                }
                Ok(Output::new(Value::Array(data), table(&["device", "probe", "kind", "handles", "subscribers", "cost"], &rows)))
            }
        }
    }

    fn query(&mut self, op: &QueryOp) -> Result<Output, CliError> {
        match op {
            QueryOp::Run { file } => {
                let q: Query = load_file(&self.path(file))?;
                let net = self.net()?;
                let now = net.now();
                let id = net.ctl.deploy(&q, now)?;
                let probes = net.ctl.query(id).map_or(0, |(_, _, d, _)| d.len());
                Ok(Output::new(json!({ "query": id, "probes": probes, "at": now }), format!("query {id} deployed with {probes} probes")))
            }
            QueryOp::Revoke { id } => {
                let rs = self.ctl()?.revoke_query(*id)?;
                Ok(Output::new(json!({ "query": id, "rows": rs.rows.len() }), format!("query {id} revoked, {} rows", rs.rows.len())))
            }
            QueryOp::List => {
                let ctl = self.ctl()?;
                let mut data = Vec::new();
                let mut rows = Vec::new();
                for id in ctl.query_ids() {
                    let Some((q, _, deployed, live)) = ctl.query(id) else { continue };
                    let n = ctl.results(id).map_or(0, |r| r.rows.len());
                    let kind = serde_json::to_value(q).ok().and_then(|v| v["kind"].as_str().map(String::from)).unwrap_or_default();
                    rows.push(vec![id.to_string(), kind.clone(), deployed.len().to_string(), n.to_string(), live.to_string()]);
                    data.push(json!({ "query": id, "kind": kind, "probes": deployed.len(), "rows": n, "live": live }));
                }
                Ok(Output::new(Value::Array(data), table(&["query", "kind", "probes", "rows", "live"], &rows)))
            }
        }
    }

    fn pools(&mut self, device: Option<DeviceId>) -> Result<Output, CliError> {
        let mut data = Vec::new();
        let mut rows = Vec::new();
        for d in self.devices(device)? {
            let Message::PoolStatsReply { stats } = self.ctl()?.call(d, Message::PoolStatsReq)? else {
                return Err(fail("unexpected pool stats reply"));
            };
            for (class, s) in stats {
                rows.push(vec![format!("d{d}"), format!("{class:?}"), s.capacity.to_string(), s.allocated.to_string(), s.free.to_string()]);
                data.push(json!({ "device": d, "class": class, "capacity": s.capacity, "allocated": s.allocated, "free": s.free }));
            }
        }
        Ok(Output::new(Value::Array(data), table(&["device", "class", "capacity", "allocated", "free"], &rows)))
    }

    fn scenario(&mut self, script: &Path, trace: Option<&Path>) -> Result<Output, CliError> {
        let spec = self.spec.clone().ok_or_else(|| fail("no topology loaded; use `topo load <file>` or --topo"))?;
        let path = self.path(script);
        let text = std::fs::read_to_string(&path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
        let script = Script::from_toml(&text).map_err(|e| fail(format!("{}: {e}", path.display())))?;
        let source = match trace {
            Some(t) => {
                let t = self.path(t);
                let f = std::fs::File::open(&t).map_err(|e| fail(format!("{}: {e}", t.display())))?;
                let packets = read_trace(&mut std::io::BufReader::new(f)).map_err(|e| fail(format!("{}: {e}", t.display())))?;
                TrafficSource::Trace { seed: self.seed.unwrap_or(0), packets }
            }
            None => match script.traffic.clone() {
                Some(mut p) => {
                    if let Some(s) = self.seed {
                        p.seed = s;
                    }
                    TrafficSource::Profile(p)
                }
                None => TrafficSource::Trace { seed: self.seed.unwrap_or(0), packets: vec![] },
            },
        };
        let rec = run_scenario(&spec, &source, &script)?;
        let timeline: Vec<Value> = rec.timeline.iter().map(|t| json!({ "ts": t.ts, "action": t.action, "outcome": t.outcome })).collect();
        let data = json!({
            "seed": rec.seed,
            "injected": rec.injected,
            "generated": rec.generated,
            "edge_emitted": rec.edge_emitted,
            "traffic_drops": rec.traffic_drops(),
            "total_drops": rec.total_drops(),
            "reports": rec.reports.len(),
            "rows": rec.results.len(),
            "conserved": rec.conserved(),
            "timeline": timeline,
        });
        let mut text = format!(
            "seed {}: {} injected, {} emitted at the edge, {} traffic drops, {} reports, {} rows",
            rec.seed,
            rec.injected,
            rec.edge_emitted,
            rec.traffic_drops(),
            rec.reports.len(),
            rec.results.len()
        );
        for t in &rec.timeline {
            text.push_str(&format!("\n  {:>12}  {}  -> {}", t.ts, t.action, t.outcome));
        }
        Ok(Output::new(data, text))
    }

    fn dump(&mut self, query: Option<u32>, raw: bool) -> Result<Output, CliError> {
        let ctl = self.ctl()?;
        if raw {
            let log = ctl.report_log();
            let data = log
                .iter()
                .map(|r| json!({ "device": r.device, "tag": r.tag, "ts": r.ts, "fields": wide_vec(&r.fields), "mirrored": r.packet.is_some() }))
                .collect();
            let rows: Vec<Vec<String>> = log
                .iter()
                .map(|r| {
                    let f: Vec<String> = r.fields.iter().map(u128::to_string).collect();
                    vec![r.ts.to_string(), format!("d{}", r.device), r.tag.to_string(), f.join(",")]
                })
                .collect();
            return Ok(Output::new(Value::Array(data), table(&["ts", "device", "tag", "fields"], &rows)));
        }
        let ids = match query {
            Some(q) if ctl.results(q).is_none() => return Err(fail(format!("no such query {q}"))),
            Some(q) => vec![q],
            None => ctl.query_ids(),
        };
        let mut data = Vec::new();
        let mut rows = Vec::new();
        for q in ids {
            for r in ctl.results(q).map(|r| r.rows.as_slice()).unwrap_or(&[]) {
                data.push(json!({ "query": q, "ts": r.ts, "device": r.device, "probe": r.probe, "fields": wide_vec(&r.fields), "value": r.value }));
                let f: Vec<String> = r.fields.iter().map(u128::to_string).collect();
                let v = r.value.map_or_else(|| "-".to_string(), |v| v.to_string());
                rows.push(vec![q.to_string(), r.ts.to_string(), format!("d{}", r.device), v, f.join(",")]);
            }
        }
        Ok(Output::new(Value::Array(data), table(&["query", "ts", "device", "value", "fields"], &rows)))
    }

    /// Parses and runs one line, as a record. None for blank lines.
    pub fn run_line(&mut self, n: usize, text: &str) -> Option<(Record, String)> {
        let command = text.split('#').next().unwrap_or("").trim().to_string();
        let result = match parse_line(n, text) {
            Ok(None) => return None,
            Ok(Some(c)) => self.execute(&c),
            Err(e) => Err(e),
        };
        Some(match result {
            Ok(o) => (Record { line: n, command, ok: true, data: o.data, error: None }, o.text),
            Err(CliError::Help(h)) => (Record { line: n, command, ok: true, data: Value::Null, error: None }, h.trim_end().to_string()),
            Err(e) => {
                let text = e.to_string();
                let info = match e {
                    CliError::Parse { msg, hint, .. } => ErrorInfo { kind: "parse".into(), code: None, message: msg, hint },
                    CliError::Command { code, msg } => ErrorInfo { kind: "command".into(), code, message: msg, hint: None },
                    CliError::Help(_) => unreachable!("handled above"),
                };
                (Record { line: n, command, ok: false, data: Value::Null, error: Some(info) }, text)
            }
        })
    }
}
