//! Virtual-time network simulator.
//!
//! Events run in (time, sequence) order. Device timers due at a time fire
//! before packet events at that time. A port transmits one packet at a time;
//! with a link capacity the next packet waits for the serialization delay,
//! and a packet sent at `t` arrives at the peer at `t + tx + latency`.

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Ordering;
use std::rc::Rc;

use dnp_controller::{Controller, Endpoint, RowRecord};
use dnp_core::ids::{DeviceId, PortId};
use dnp_core::vm::is_probe_packet;
use dnp_core::{Device, DropReason, Effects, Report, Verdict};
use dnp_proto::{LocalChannel, ReportQueue};
use serde::{Deserialize, Serialize};

use crate::netspec::NetSpec;
use crate::traffic::TracePacket;
use crate::HarnessError;

/// One packet leaving a port.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    pub ts: u64,
    pub device: DeviceId,
    pub port: PortId,
    /// No link is attached; the packet leaves the network.
    pub edge: bool,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCount {
    pub device: DeviceId,
    pub reason: DropReason,
    /// Marked probe packets are counted apart from traffic.
    pub probe: bool,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub ts: u64,
    pub action: String,
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub seed: u64,
    pub emissions: Vec<Emission>,
    pub reports: Vec<Report>,
    pub drops: Vec<DropCount>,
    pub injected: u64,
    pub generated: u64,
    pub edge_emitted: u64,
    pub in_flight: u64,
    pub timeline: Vec<TimelineEntry>,
    pub results: Vec<RowRecord>,
    #[serde(default)]
    pub wall_pps: Option<f64>,
}

impl ExperimentRecord {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("record serializes")
    }

    /// Traffic drops, excluding marked probe packets.
    pub fn traffic_drops(&self) -> u64 {
        self.drops.iter().filter(|d| !d.probe).map(|d| d.count).sum()
    }

    pub fn total_drops(&self) -> u64 {
        self.drops.iter().map(|d| d.count).sum()
    }

    /// Injected plus generated packets equal those that left the network,
    /// were dropped, or are still in flight.
    pub fn conserved(&self) -> bool {
        self.injected + self.generated == self.edge_emitted + self.total_drops() + self.in_flight
    }
}

#[derive(Debug)]
enum Event {
    Arrive { at: Endpoint, pkt: Vec<u8> },
    Transmit { at: Endpoint },
}

#[derive(Debug)]
struct Scheduled {
    time: u64,
    seq: u64,
    ev: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.seq) == (o.time, o.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, o: &Self) -> Ordering {
        (o.time, o.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Debug, Clone, Copy)]
struct Wire {
    peer: Endpoint,
    latency: u64,
    capacity: u64,
}

pub struct SimNetwork {
    devices: BTreeMap<DeviceId, Rc<RefCell<Device>>>,
    queues: BTreeMap<DeviceId, ReportQueue>,
    wires: BTreeMap<Endpoint, Wire>,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    now: u64,
    busy: BTreeSet<Endpoint>,
    busy_until: BTreeMap<Endpoint, u64>,
    drops: BTreeMap<(DeviceId, DropReason, bool), u64>,
    pending_arrivals: u64,
    pub ctl: Controller,
    pub record: ExperimentRecord,
}

impl SimNetwork {
    pub fn new(spec: &NetSpec) -> Result<Self, HarnessError> {
        Self::with_devices(spec, spec.build_devices()?)
    }

    /// Builds the network around already constructed devices, one per
    /// device in `spec`, in the same order.
    pub fn with_devices(spec: &NetSpec, devs: Vec<Device>) -> Result<Self, HarnessError> {
        let topo = spec.topology();
        let mut ctl = Controller::new(topo)?;
        let mut devices = BTreeMap::new();
        let mut queues = BTreeMap::new();
        for d in devs {
            let id = d.id();
            let d = Rc::new(RefCell::new(d));
            let (ch, q) = LocalChannel::new(d.clone());
            ctl.connect(id, Box::new(ch))?;
            devices.insert(id, d);
            queues.insert(id, q);
        }
        let mut wires = BTreeMap::new();
        for l in &spec.links {
            wires.insert(l.a, Wire { peer: l.b, latency: l.latency_ns, capacity: l.capacity_bps });
            wires.insert(l.b, Wire { peer: l.a, latency: l.latency_ns, capacity: l.capacity_bps });
        }
        Ok(SimNetwork {
            devices,
            queues,
            wires,
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
            busy: BTreeSet::new(),
            busy_until: BTreeMap::new(),
            drops: BTreeMap::new(),
            pending_arrivals: 0,
            ctl,
            record: ExperimentRecord {
                seed: 0,
                emissions: vec![],
                reports: vec![],
                drops: vec![],
                injected: 0,
                generated: 0,
                edge_emitted: 0,
                in_flight: 0,
                timeline: vec![],
                results: vec![],
                wall_pps: None,
            },
        })
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn device_ids(&self) -> Vec<DeviceId> {
        self.devices.keys().copied().collect()
    }

    pub fn device(&self, id: DeviceId) -> Ref<'_, Device> {
        self.devices[&id].borrow()
    }

    pub fn device_mut(&self, id: DeviceId) -> RefMut<'_, Device> {
        self.devices[&id].borrow_mut()
    }

    fn schedule(&mut self, time: u64, ev: Event) {
        if matches!(ev, Event::Arrive { .. }) {
            self.pending_arrivals += 1;
        }
        self.seq += 1;
        self.heap.push(Scheduled { time, seq: self.seq, ev });
    }

    pub fn inject(&mut self, pkts: &[TracePacket]) {
        self.record.injected += pkts.len() as u64;
        for p in pkts {
            self.schedule(p.ts, Event::Arrive { at: p.ingress, pkt: p.bytes.clone() });
        }
    }

    /// Runs every event and timer strictly before `t`, then sets the clock
    /// to `t`. Control actions at `t` therefore precede packets at `t`.
    pub fn run_before(&mut self, t: u64) {
        self.run(t, false);
    }

    /// Runs every event and timer at or before `t`.
    pub fn run_through(&mut self, t: u64) {
        self.run(t, true);
    }

    /// Delivers every packet still queued or on a link without firing
    /// further timers.
    pub fn drain(&mut self) {
        while let Some(s) = self.heap.pop() {
            self.now = self.now.max(s.time);
            self.dispatch(s.ev);
        }
    }

    fn run(&mut self, bound: u64, inclusive: bool) {
        let within = |x: u64| if inclusive { x <= bound } else { x < bound };
        loop {
            let ev_t = self.heap.peek().map(|e| e.time);
            let timer = self
                .devices
                .iter()
                .filter_map(|(id, d)| d.borrow().next_timer().map(|t| (t, *id)))
                .min();
            match (timer, ev_t) {
                (Some((tt, dev)), e) if within(tt) && e.is_none_or(|e| tt <= e) => {
                    self.now = self.now.max(tt);
                    let eff = self.devices[&dev].borrow_mut().advance_clock(tt);
                    self.apply(dev, eff);
                }
                (_, Some(e)) if within(e) => {
                    let s = self.heap.pop().expect("peeked");
                    self.now = self.now.max(s.time);
                    self.dispatch(s.ev);
                }
                _ => break,
            }
        }
        self.now = self.now.max(bound);
    }

    fn dispatch(&mut self, ev: Event) {
        match ev {
            Event::Arrive { at, pkt } => {
                self.pending_arrivals -= 1;
                let out = self.devices[&at.device].borrow_mut().process_packet(at.port, pkt, self.now);
                self.apply(at.device, out.effects);
                match out.verdict {
                    Verdict::Forward(p) => self.enqueue(Endpoint::new(at.device, p), out.packet),
                    Verdict::Drop(r) => self.count_drop(at.device, r, is_probe_packet(&out.packet)),
                }
            }
            Event::Transmit { at } => self.transmit(at),
        }
    }

    fn count_drop(&mut self, dev: DeviceId, r: DropReason, probe: bool) {
        *self.drops.entry((dev, r, probe)).or_default() += 1;
    }

    fn apply(&mut self, dev: DeviceId, eff: Effects) {
        for r in eff.reports {
            self.queues[&dev].push(r.clone());
            self.record.reports.push(r);
        }
        for (port, pkt) in eff.generated {
            self.record.generated += 1;
            self.enqueue(Endpoint::new(dev, port), pkt);
        }
    }

    fn enqueue(&mut self, at: Endpoint, pkt: Vec<u8>) {
        let probe = is_probe_packet(&pkt);
        let (ok, eff) = self.devices[&at.device].borrow_mut().enqueue(at.port, pkt, self.now);
        self.apply(at.device, eff);
        if !ok {
            let full = self.devices[&at.device].borrow().port_config(at.port).is_ok();
            self.count_drop(at.device, if full { DropReason::QueueFull } else { DropReason::NoSuchPort }, probe);
            return;
        }
        if self.busy.insert(at) {
            let t = self.now.max(self.busy_until.get(&at).copied().unwrap_or(0));
            self.schedule(t, Event::Transmit { at });
        }
    }

    fn transmit(&mut self, at: Endpoint) {
        let Some((pkt, eff)) = self.devices[&at.device].borrow_mut().dequeue(at.port, self.now) else {
            self.busy.remove(&at);
            return;
        };
        self.apply(at.device, eff);
        let wire = self.wires.get(&at).copied();
        let tx = match wire {
            Some(w) if w.capacity > 0 => (pkt.len() as u128 * 8 * 1_000_000_000 / w.capacity as u128) as u64,
            _ => 0,
        };
        self.record.emissions.push(Emission {
            ts: self.now,
            device: at.device,
            port: at.port,
            edge: wire.is_none(),
            bytes: pkt.clone(),
        });
        match wire {
            Some(w) => self.schedule(self.now + tx + w.latency, Event::Arrive { at: w.peer, pkt }),
            None => self.record.edge_emitted += 1,
        }
        self.busy_until.insert(at, self.now + tx);
        let more = self.devices[&at.device].borrow().queue_depth(at.port).unwrap_or(0) > 0;
        if more {
            self.schedule(self.now + tx, Event::Transmit { at });
        } else {
            self.busy.remove(&at);
        }
    }

    /// Packets in flight on links or waiting in port queues.
    pub fn in_flight(&self) -> u64 {
        let queued: u64 = self
            .devices
            .values()
            .map(|d| {
                let d = d.borrow();
                d.ports().iter().map(|p| d.queue_depth(p.id).unwrap_or(0) as u64).sum::<u64>()
            })
            .sum();
        queued + self.pending_arrivals
    }

    pub fn log(&mut self, action: impl Into<String>, outcome: impl Into<String>) {
        self.record.timeline.push(TimelineEntry { ts: self.now, action: action.into(), outcome: outcome.into() });
    }

    /// Finalizes the record: drop counts, in-flight count, and the rows of
    /// every query still known to the controller.
    pub fn finish(mut self) -> ExperimentRecord {
        self.record.in_flight = self.in_flight();
        self.record.drops = self
            .drops
            .iter()
            .map(|(&(device, reason, probe), &count)| DropCount { device, reason, probe, count })
            .collect();
        for q in self.ctl.query_ids() {
            if let Some(rs) = self.ctl.results(q) {
                self.record.results.extend(rs.rows.iter().map(|r| RowRecord {
                    query: q,
                    ts: r.ts,
                    device: r.device,
                    probe: r.probe,
                    fields: r.fields.clone(),
                    value: r.value,
                }));
            }
        }
        self.record
    }
}
