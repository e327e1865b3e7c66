//! Output comparison between runs, and the catalog of probes exercised by
//! the passivity experiments.

use std::collections::BTreeMap;

use dnp_core::field::FieldRef;
use dnp_core::ids::{DeviceId, PortId};
use dnp_core::pool::CounterUnit;
use dnp_core::probe::{AttachPoint, ProbeKind, ProbeSpec, TcpLayout};
use dnp_core::vm::is_probe_packet;
use dnp_core::MatchKey;
use serde::{Deserialize, Serialize};

use crate::sim::ExperimentRecord;
use crate::HarnessError;

/// First divergence on one port.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortDiff {
    pub device: DeviceId,
    pub port: PortId,
    /// Position in the port's emission sequence.
    pub index: usize,
    pub a: Option<Vec<u8>>,
    pub b: Option<Vec<u8>>,
    pub len_a: usize,
    pub len_b: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffReport {
    pub ports: Vec<PortDiff>,
    /// Marked probe packets left out of the comparison, per record.
    pub probe_packets: (usize, usize),
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.ports.is_empty()
    }
}

type PortSeqs<'a> = BTreeMap<(DeviceId, PortId), Vec<&'a [u8]>>;

fn per_port(r: &ExperimentRecord, skip_probes: bool) -> (PortSeqs<'_>, usize) {
    let mut out = PortSeqs::new();
    let mut probes = 0;
    for e in &r.emissions {
        if is_probe_packet(&e.bytes) {
            probes += 1;
            if skip_probes {
                continue;
            }
        }
        out.entry((e.device, e.port)).or_default().push(&e.bytes);
    }
    (out, probes)
}

/// Compares the per-port emission sequences of two runs of the same
/// traffic. Controller reports are not emissions; marked probe packets are
/// skipped unless `include_probes`.
pub fn diff_emissions(a: &ExperimentRecord, b: &ExperimentRecord, include_probes: bool) -> Result<DiffReport, HarnessError> {
    if a.seed != b.seed {
        return Err(HarnessError::SeedMismatch(a.seed, b.seed));
    }
    let (pa, na) = per_port(a, !include_probes);
    let (pb, nb) = per_port(b, !include_probes);
    let mut keys: Vec<_> = pa.keys().chain(pb.keys()).copied().collect();
    keys.sort();
    keys.dedup();
    let empty = Vec::new();
    let mut ports = Vec::new();
    for k in keys {
        let sa = pa.get(&k).unwrap_or(&empty);
        let sb = pb.get(&k).unwrap_or(&empty);
        let n = sa.len().max(sb.len());
        if let Some(index) = (0..n).find(|&i| sa.get(i) != sb.get(i)) {
            ports.push(PortDiff {
                device: k.0,
                port: k.1,
                index,
                a: sa.get(index).map(|x| x.to_vec()),
                b: sb.get(index).map(|x| x.to_vec()),
                len_a: sa.len(),
                len_b: sb.len(),
            });
        }
    }
    Ok(DiffReport { ports, probe_packets: (na, nb) })
}

/// [`diff_emissions`] with marked probe packets excluded.
pub fn compare_baseline(a: &ExperimentRecord, b: &ExperimentRecord) -> Result<DiffReport, HarnessError> {
    diff_emissions(a, b, false)
}

/// Every probe kind, placed on a chain of at least two devices running the
/// byte-0 route pipeline with traffic entering device 1 port 1 towards
/// port 2.
pub fn probe_catalog() -> Vec<(DeviceId, ProbeSpec)> {
    use AttachPoint as A;
    use ProbeKind as K;
    let layout = TcpLayout::default();
    let syn = Some(dnp_core::probe::Condition { field: layout.flags, equals: 0x02 });
    vec![
        (1, ProbeSpec::new(K::Counter { unit: CounterUnit::Packets, condition: None }, A::TableEntry { table: 0, key: MatchKey::exact(2, 8), priority: None })),
        (2, ProbeSpec::new(K::Counter { unit: CounterUnit::Bytes, condition: syn }, A::PortEgress { port: 2 })),
        (1, ProbeSpec::new(K::ThresholdPush { threshold: 500, flow_id: None, unit: CounterUnit::Packets, condition: None }, A::PortIngress { port: 1 })),
        (2, ProbeSpec::new(K::TimerPoll { interval_ns: 1_000_000, threshold: 0, unit: CounterUnit::Packets }, A::PortIngress { port: 1 })),
        (1, ProbeSpec::new(K::FsmHalfOpen { layout, capacity: 4096 }, A::PortIngress { port: 1 })),
        (2, ProbeSpec::new(K::FlowDuration { layout }, A::TableEntry { table: 0, key: MatchKey::exact(2, 8), priority: None })),
        (1, ProbeSpec::new(K::QueueWatermark { low: Some(2), high: Some(8) }, A::Queue { port: 2 })),
        (2, ProbeSpec::new(K::Filter { digest_fields: vec![FieldRef::pkt(208, 32)], sample_n: 16, condition: None }, A::TableMiss { table: 0 })),
        (2, ProbeSpec::new(K::Filter { digest_fields: vec![], sample_n: 64, condition: syn }, A::PortIngress { port: 1 })),
        (2, ProbeSpec::new(K::LatencySink, A::PortIngress { port: 1 })),
        (1, ProbeSpec::new(K::LatencySource { port: 2, interval_ns: 250_000, one_shot: false }, A::Timer)),
    ]
}
