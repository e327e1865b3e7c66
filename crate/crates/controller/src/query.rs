//! Queries and their compilation into per-device probe sets.
//!
//! Query text is TOML. The `kind` key selects the query kind and the
//! remaining keys are its selectors and parameters:
//!
//! ```toml
//! id = 3
//! mode = "continuous"
//! kind = "link_latency"
//! from = { device = 1, port = 2 }
//! to = { device = 2, port = 1 }
//! rate = 10
//! ```

use dnp_core::field::FieldRef;
use dnp_core::ids::*;
use dnp_core::pool::CounterUnit;
use dnp_core::probe::{AttachPoint, Condition, ProbeKind, ProbeSpec, TcpLayout};
use dnp_core::MatchKey;
use serde::{Deserialize, Serialize};

use crate::topology::{Endpoint, Topology};
use crate::ControllerError;

pub type QueryId = u32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    OneShot,
    #[default]
    Continuous,
}

fn default_threshold() -> u64 {
    100
}

fn default_capacity() -> u32 {
    4096
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryKind {
    /// Packet or byte count of one flow, read on a poll schedule.
    FlowStats {
        device: DeviceId,
        table: TableId,
        key: MatchKey,
        #[serde(default)]
        unit: CounterUnit,
        #[serde(default)]
        poll_ns: Option<u64>,
    },
    /// Egress load of one or more ports, read on a poll schedule.
    PortLoad {
        ports: Vec<Endpoint>,
        #[serde(default)]
        unit: CounterUnit,
        #[serde(default)]
        poll_ns: Option<u64>,
    },
    /// Half-open TCP connections seen at a port, with a push every
    /// `threshold` SYNs.
    HalfOpenCount {
        at: Endpoint,
        #[serde(default = "default_threshold")]
        threshold: u64,
        #[serde(default = "default_capacity")]
        capacity: u32,
        #[serde(default)]
        poll_ns: Option<u64>,
    },
    FlowDuration {
        at: Endpoint,
    },
    QueueHealth {
        at: Endpoint,
        #[serde(default)]
        low: Option<u32>,
        #[serde(default)]
        high: Option<u32>,
    },
    /// One-way latency of the link leaving `from` and arriving at `to`.
    LinkLatency {
        from: Endpoint,
        to: Endpoint,
        /// Probe packets per second.
        rate: u32,
    },
    FilteredMirror {
        at: Endpoint,
        #[serde(default)]
        fields: Vec<FieldRef>,
        #[serde(default = "one")]
        sample_n: u32,
        #[serde(default)]
        condition: Option<Condition>,
    },
    /// Needs packet rewriting, which probes never do.
    PathTrace {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: QueryId,
    #[serde(default)]
    pub mode: Mode,
    #[serde(flatten)]
    pub kind: QueryKind,
}

impl Query {
    pub fn from_toml(s: &str) -> Result<Self, ControllerError> {
        toml::from_str(s).map_err(|e| ControllerError::InvalidQuery(e.to_string()))
    }
}

/// Reduction applied to each row's fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PostProcess {
    /// `fields[minuend] - fields[subtrahend]`.
    Subtract { minuend: usize, subtrahend: usize },
    /// Running sum of `fields[field]` per source.
    Sum { field: usize },
    /// Per-second rate between successive reads of the same source.
    Rate,
    /// Running number of rows per source.
    Count,
    /// Raw fields, no value.
    Dump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedProbe {
    pub device: DeviceId,
    pub spec: ProbeSpec,
    /// Read this probe's first counter on the poll schedule.
    pub poll: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPlan {
    pub query: QueryId,
    pub mode: Mode,
    pub probes: Vec<PlannedProbe>,
    /// `(a, b)`: probe `a` must be live before probe `b` is installed.
    pub order: Vec<(usize, usize)>,
    pub post: PostProcess,
    pub poll_ns: Option<u64>,
}

impl QueryPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plans serialize")
    }

    /// Probe indices in a deployment order that respects `order`, lowest
    /// index first among ready probes.
    pub fn topo_order(&self) -> Result<Vec<usize>, ControllerError> {
        let n = self.probes.len();
        let mut indeg = vec![0usize; n];
        for &(a, b) in &self.order {
            if a >= n || b >= n {
                return Err(ControllerError::InvalidQuery("order references a missing probe".into()));
            }
            indeg[b] += 1;
        }
        let mut out = Vec::with_capacity(n);
        let mut done = vec![false; n];
        while out.len() < n {
            let Some(i) = (0..n).find(|&i| !done[i] && indeg[i] == 0) else {
                return Err(ControllerError::InvalidQuery("order constraints form a cycle".into()));
            };
            done[i] = true;
            out.push(i);
            for &(a, b) in &self.order {
                if a == i {
                    indeg[b] -= 1;
                }
            }
        }
        Ok(out)
    }
}

fn need_port(topo: &Topology, e: Endpoint) -> Result<(), ControllerError> {
    if topo.has_port(e) {
        Ok(())
    } else {
        Err(ControllerError::UnresolvedSelector(format!("no port {e}")))
    }
}

fn need_device(topo: &Topology, d: DeviceId) -> Result<(), ControllerError> {
    topo.device(d).map(|_| ()).ok_or_else(|| ControllerError::UnresolvedSelector(format!("no device {d}")))
}

fn poll_interval(mode: Mode, poll_ns: Option<u64>) -> Result<Option<u64>, ControllerError> {
    match (mode, poll_ns) {
        (_, Some(0)) => Err(ControllerError::InvalidQuery("poll interval must be positive".into())),
        (Mode::Continuous, None) => Err(ControllerError::InvalidQuery("continuous pull query needs poll_ns".into())),
        (_, p) => Ok(p),
    }
}

/// Compiles a query against the topology. The result depends only on the
/// inputs.
pub fn compile(q: &Query, topo: &Topology) -> Result<QueryPlan, ControllerError> {
    let plan = |probes, order, post, poll_ns| QueryPlan { query: q.id, mode: q.mode, probes, order, post, poll_ns };
    let probe = |device, kind, attach, poll| PlannedProbe { device, spec: ProbeSpec::new(kind, attach), poll };
    Ok(match &q.kind {
        QueryKind::FlowStats { device, table, key, unit, poll_ns } => {
            need_device(topo, *device)?;
            let kind = ProbeKind::Counter { unit: *unit, condition: None };
            let attach = AttachPoint::TableEntry { table: *table, key: *key, priority: None };
            plan(vec![probe(*device, kind, attach, true)], vec![], PostProcess::Rate, poll_interval(q.mode, *poll_ns)?)
        }
        QueryKind::PortLoad { ports, unit, poll_ns } => {
            if ports.is_empty() {
                return Err(ControllerError::UnresolvedSelector("no ports selected".into()));
            }
            let mut probes = Vec::new();
            for e in ports {
                need_port(topo, *e)?;
                let kind = ProbeKind::Counter { unit: *unit, condition: None };
                probes.push(probe(e.device, kind, AttachPoint::PortEgress { port: e.port }, true));
            }
            plan(probes, vec![], PostProcess::Rate, poll_interval(q.mode, *poll_ns)?)
        }
        QueryKind::HalfOpenCount { at, threshold, capacity, poll_ns } => {
            need_port(topo, *at)?;
            if *threshold == 0 {
                return Err(ControllerError::InvalidQuery("threshold must be positive".into()));
            }
            let layout = TcpLayout::default();
            let attach = AttachPoint::PortIngress { port: at.port };
            let fsm = probe(at.device, ProbeKind::FsmHalfOpen { layout, capacity: *capacity }, attach, true);
            let push = ProbeKind::ThresholdPush {
                threshold: *threshold,
                flow_id: None,
                unit: CounterUnit::Packets,
                condition: Some(Condition { field: layout.flags, equals: 0x02 }),
            };
            let push = probe(at.device, push, attach, false);
            plan(vec![fsm, push], vec![], PostProcess::Dump, poll_interval(Mode::OneShot, *poll_ns)?)
        }
        QueryKind::FlowDuration { at } => {
            need_port(topo, *at)?;
            let kind = ProbeKind::FlowDuration { layout: TcpLayout::default() };
            let p = probe(at.device, kind, AttachPoint::PortIngress { port: at.port }, false);
            plan(vec![p], vec![], PostProcess::Subtract { minuend: 1, subtrahend: 0 }, None)
        }
        QueryKind::QueueHealth { at, low, high } => {
            need_port(topo, *at)?;
            let kind = ProbeKind::QueueWatermark { low: *low, high: *high };
            plan(vec![probe(at.device, kind, AttachPoint::Queue { port: at.port }, false)], vec![], PostProcess::Dump, None)
        }
        QueryKind::LinkLatency { from, to, rate } => {
            need_port(topo, *from)?;
            need_port(topo, *to)?;
            if topo.peer(*from).map(|p| p.0) != Some(*to) {
                return Err(ControllerError::UnresolvedSelector(format!("no link {from} -> {to}")));
            }
            if *rate == 0 {
                return Err(ControllerError::InvalidQuery("rate must be positive".into()));
            }
            let sink = probe(to.device, ProbeKind::LatencySink, AttachPoint::PortIngress { port: to.port }, false);
            let source = ProbeKind::LatencySource {
                port: from.port,
                interval_ns: 1_000_000_000 / *rate as u64,
                one_shot: q.mode == Mode::OneShot,
            };
            let source = probe(from.device, source, AttachPoint::Timer, false);
            plan(vec![sink, source], vec![(0, 1)], PostProcess::Subtract { minuend: 1, subtrahend: 0 }, None)
        }
        QueryKind::FilteredMirror { at, fields, sample_n, condition } => {
            need_port(topo, *at)?;
            if *sample_n == 0 {
                return Err(ControllerError::InvalidQuery("sample_n must be positive".into()));
            }
            let kind = ProbeKind::Filter { digest_fields: fields.clone(), sample_n: *sample_n, condition: *condition };
            plan(vec![probe(at.device, kind, AttachPoint::PortIngress { port: at.port }, false)], vec![], PostProcess::Dump, None)
        }
        QueryKind::PathTrace {} => return Err(ControllerError::UnsupportedKind("path_trace".into())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{Link, TopoDevice};

    fn topo() -> Topology {
        Topology {
            devices: vec![TopoDevice { id: 1, ports: vec![1, 2] }, TopoDevice { id: 2, ports: vec![1, 3] }],
            links: vec![Link { a: Endpoint::new(1, 1), b: Endpoint::new(2, 3), latency_ns: 5_000_000, capacity_bps: 0 }],
        }
    }

    #[test]
    fn link_latency_is_sink_then_source() {
        let q = Query {
            id: 1,
            mode: Mode::Continuous,
            kind: QueryKind::LinkLatency { from: Endpoint::new(1, 1), to: Endpoint::new(2, 3), rate: 10 },
        };
        let p = compile(&q, &topo()).unwrap();
        assert_eq!(p.probes.len(), 2);
        assert_eq!(p.probes[0].spec.kind, ProbeKind::LatencySink);
        assert_eq!(p.probes[0].device, 2);
        assert!(matches!(p.probes[1].spec.kind, ProbeKind::LatencySource { port: 1, interval_ns: 100_000_000, one_shot: false }));
        assert_eq!(p.order, vec![(0, 1)]);
        assert_eq!(p.post, PostProcess::Subtract { minuend: 1, subtrahend: 0 });
        assert_eq!(p.topo_order().unwrap(), vec![0, 1]);
    }

    #[test]
    fn link_latency_needs_a_link() {
        let q = Query {
            id: 1,
            mode: Mode::Continuous,
            kind: QueryKind::LinkLatency { from: Endpoint::new(1, 2), to: Endpoint::new(2, 3), rate: 10 },
        };
        assert!(matches!(compile(&q, &topo()), Err(ControllerError::UnresolvedSelector(_))));
    }

    #[test]
    fn flow_stats_is_one_polled_counter() {
        let q = Query {
            id: 2,
            mode: Mode::Continuous,
            kind: QueryKind::FlowStats { device: 1, table: 0, key: MatchKey::exact(4, 8), unit: CounterUnit::Packets, poll_ns: Some(1_000_000_000) },
        };
        let p = compile(&q, &topo()).unwrap();
        assert_eq!(p.probes.len(), 1);
        assert!(p.probes[0].poll);
        assert!(matches!(p.probes[0].spec.kind, ProbeKind::Counter { .. }));
        assert_eq!((p.post, p.poll_ns), (PostProcess::Rate, Some(1_000_000_000)));
        assert_eq!(p.to_json(), compile(&q, &topo()).unwrap().to_json());
    }

    #[test]
    fn half_open_is_fsm_plus_threshold() {
        let q = Query {
            id: 3,
            mode: Mode::Continuous,
            kind: QueryKind::HalfOpenCount { at: Endpoint::new(1, 2), threshold: 100, capacity: 4096, poll_ns: None },
        };
        let p = compile(&q, &topo()).unwrap();
        let kinds: Vec<_> = p.probes.iter().map(|p| p.spec.kind.name()).collect();
        assert_eq!(kinds, vec!["fsm_half_open", "threshold_push"]);
        assert!(p.order.is_empty());
        assert_eq!(p.post, PostProcess::Dump);
    }

    #[test]
    fn path_trace_is_unsupported() {
        let q = Query { id: 4, mode: Mode::OneShot, kind: QueryKind::PathTrace {} };
        assert!(matches!(compile(&q, &topo()), Err(ControllerError::UnsupportedKind(_))));
    }

    #[test]
    fn query_text_parses() {
        let q = Query::from_toml(
            "id = 3\nkind = \"link_latency\"\nfrom = { device = 1, port = 1 }\nto = { device = 2, port = 3 }\nrate = 10\n",
        )
        .unwrap();
        assert_eq!(q.mode, Mode::Continuous);
        assert!(matches!(q.kind, QueryKind::LinkLatency { rate: 10, .. }));
        let q = Query::from_toml(
            "id = 4\nmode = \"one_shot\"\nkind = \"flow_stats\"\ndevice = 1\ntable = 0\nkey = { value = \"0x4\", mask = \"0xff\" }\n",
        )
        .unwrap();
        assert!(matches!(q.kind, QueryKind::FlowStats { key, .. } if key == MatchKey::exact(4, 8)));
    }

    #[test]
    fn cycles_are_rejected() {
        let mut p = compile(
            &Query { id: 1, mode: Mode::Continuous, kind: QueryKind::LinkLatency { from: Endpoint::new(1, 1), to: Endpoint::new(2, 3), rate: 1 } },
            &topo(),
        )
        .unwrap();
        p.order.push((1, 0));
        assert!(p.topo_order().is_err());
    }
}
