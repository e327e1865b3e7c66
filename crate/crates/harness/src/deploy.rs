//! Deployment latency: runtime probe install against a full pipeline
//! teardown and reload, both driven over the control channel while traffic
//! runs.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use dnp_controller::{Controller, Endpoint};
use dnp_core::config::PipelineConfig;
use dnp_core::ids::{DeviceId, EntryId, ResourceHandle, SlotId, TableId};
use dnp_core::pool::CounterUnit;
use dnp_core::probe::{AttachPoint, ProbeKind, ProbeSpec};
use dnp_core::vm::{assemble, encode_block};
use dnp_core::{Device, EntrySpec, MatchKey, Position, TableDef, DEFAULT_MISS_SLOT};
use dnp_proto::Message;
use serde::{Deserialize, Serialize};

use crate::netspec::{DeviceSpec, NetSpec};
use crate::sim::SimNetwork;
use crate::traffic::TrafficProfile;
use crate::HarnessError;

/// The documented three-table pipeline.
pub const THREE_TABLE: &str = include_str!("../pipelines/three_table.toml");

pub fn three_table() -> PipelineConfig {
    PipelineConfig::from_toml(THREE_TABLE).expect("bundled pipeline parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeployPath {
    Dynamic,
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployOpts {
    /// Virtual time of the first control message.
    pub t0: u64,
    /// Virtual round trip charged per control message.
    pub rtt_ns: u64,
}

impl Default for DeployOpts {
    fn default() -> Self {
        DeployOpts { t0: 10_000_000, rtt_ns: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployMeasurement {
    pub path: DeployPath,
    pub messages: usize,
    pub wall_ns: u64,
    pub virtual_latency_ns: u64,
    pub interruption_window_ns: u64,
    /// Traffic packets dropped beyond the undisturbed run.
    pub dropped: u64,
}

/// What a channel-driven load created, for a later teardown.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Inventory {
    pub handles: Vec<ResourceHandle>,
    pub slots: Vec<SlotId>,
    pub tables: Vec<TableId>,
    pub entries: Vec<EntryId>,
}

fn unexpected(device: DeviceId, m: Message) -> HarnessError {
    HarnessError::Controller(dnp_controller::ControllerError::UnexpectedReply { device, got: m.name().into() })
}

/// Loads `cfg` onto an empty device with one message per resource, action,
/// table and entry. Returns what was created and the message count.
pub fn load_pipeline(ctl: &mut Controller, device: DeviceId, cfg: &PipelineConfig) -> Result<(Inventory, usize), HarnessError> {
    let mut inv = Inventory::default();
    let mut n = 0;
    let mut res = cfg.resources.clone();
    res.sort_by_key(|r| r.index);
    for r in &res {
        n += 1;
        match ctl.call(device, Message::AllocResource { req: r.req })? {
            Message::AllocReply { handle } if handle.index() == r.index => inv.handles.push(handle),
            Message::AllocReply { handle } => {
                return Err(HarnessError::Config(format!("resource {} landed at index {}", r.index, handle.index())))
            }
            m => return Err(unexpected(device, m)),
        }
    }
    let mut slots: BTreeMap<&str, SlotId> = BTreeMap::new();
    slots.insert("default_miss", DEFAULT_MISS_SLOT);
    for a in &cfg.actions {
        let block = assemble(&a.code).map_err(|e| HarnessError::Config(format!("action `{}`: {e}", a.name)))?;
        let bytes = encode_block(&block).map_err(|e| HarnessError::Config(e.to_string()))?;
        n += 1;
        match ctl.call(device, Message::LoadAction { block: bytes })? {
            Message::LoadActionReply { slot, .. } => {
                slots.insert(&a.name, slot);
                inv.slots.push(slot);
            }
            m => return Err(unexpected(device, m)),
        }
    }
    let slot = |name: &str| slots.get(name).copied().ok_or_else(|| HarnessError::Config(format!("unknown action `{name}`")));
    for t in &cfg.tables {
        let def = TableDef {
            id: t.id,
            key: t.key.clone(),
            max_entries: t.max_entries,
            miss: t.miss.as_deref().map(slot).transpose()?,
            writable_by_actions: false,
        };
        n += 1;
        ctl.call(device, Message::CreateTable { def, pos: t.position.unwrap_or(Position::End) })?;
        inv.tables.push(t.id);
        for e in &t.entries {
            if !e.params.is_empty() {
                return Err(HarnessError::Config("entry parameters are not supported by the loader".into()));
            }
            let spec = EntrySpec { priority: e.priority, key: e.key, action: slot(&e.action)?, params: vec![] };
            n += 1;
            match ctl.call(device, Message::InsertEntry { table: t.id, spec })? {
                Message::InsertEntryReply { entry } => inv.entries.push(entry),
                m => return Err(unexpected(device, m)),
            }
        }
    }
    Ok((inv, n))
}

/// Removes everything in `inv`, one message each. Returns the message count.
pub fn teardown(ctl: &mut Controller, device: DeviceId, inv: &Inventory) -> Result<usize, HarnessError> {
    let mut msgs: Vec<Message> = Vec::new();
    msgs.extend(inv.entries.iter().map(|&entry| Message::DeleteEntry { entry }));
    msgs.extend(inv.tables.iter().rev().map(|&table| Message::DeleteTable { table }));
    msgs.extend(inv.slots.iter().map(|&slot| Message::DeleteAction { slot }));
    msgs.extend(inv.handles.iter().map(|&handle| Message::ReleaseResource { handle }));
    let n = msgs.len();
    for m in msgs {
        ctl.call(device, m)?;
    }
    Ok(n)
}

/// The probe installed on the dynamic path.
pub fn deploy_probe() -> ProbeSpec {
    ProbeSpec::new(
        ProbeKind::Counter { unit: CounterUnit::Packets, condition: None },
        AttachPoint::TableEntry { table: 2, key: MatchKey::exact(2, 8), priority: None },
    )
}

fn network(cfg: &PipelineConfig) -> Result<(SimNetwork, Inventory), HarnessError> {
    let id = cfg.device.id;
    let spec = NetSpec {
        devices: vec![DeviceSpec {
            id,
            ports: cfg.device.ports.iter().map(|p| p.id).collect(),
            pipeline: None,
            caps: None,
            queue_capacity: None,
        }],
        links: vec![],
        base_dir: PathBuf::from("."),
    };
    let mut net = SimNetwork::with_devices(&spec, vec![Device::new(cfg.device.clone())])?;
    let (inv, _) = load_pipeline(&mut net.ctl, id, cfg)?;
    Ok((net, inv))
}

fn traffic_drops(net: SimNetwork) -> u64 {
    net.finish().traffic_drops()
}

/// Runs `traffic` through a single device loaded with `cfg` and performs
/// the deployment at `opts.t0`.
pub fn measure_deploy(
    cfg: &PipelineConfig,
    traffic: &TrafficProfile,
    path: DeployPath,
    opts: &DeployOpts,
) -> Result<DeployMeasurement, HarnessError> {
    let id = cfg.device.id;
    let mut p = traffic.clone();
    for e in &mut p.ingress {
        *e = Endpoint::new(id, e.port);
    }
    let pkts = p.generate().1;
    let end = pkts.last().map(|x| x.ts).unwrap_or(0);

    let (mut base, _) = network(cfg)?;
    base.inject(&pkts);
    base.run_through(end);
    base.drain();
    let base_drops = traffic_drops(base);

    // an untimed pass over the same control path on a scratch device, so
    // neither path is charged for first-call costs
    let (mut scratch, inv) = network(cfg)?;
    deploy(&mut scratch, cfg, &inv, path, opts)?;

    let (mut net, inv) = network(cfg)?;
    net.inject(&pkts);
    net.run_before(opts.t0);
    let (messages, wall_ns, window) = deploy(&mut net, cfg, &inv, path, opts)?;
    net.run_through(end);
    net.drain();
    let drops = traffic_drops(net);
    Ok(DeployMeasurement {
        path,
        messages,
        wall_ns,
        virtual_latency_ns: messages as u64 * opts.rtt_ns,
        interruption_window_ns: window,
        dropped: drops.saturating_sub(base_drops),
    })
}

/// Performs the deployment at the network's current time. Returns the
/// message count, wall time and interruption window.
fn deploy(
    net: &mut SimNetwork,
    cfg: &PipelineConfig,
    inv: &Inventory,
    path: DeployPath,
    opts: &DeployOpts,
) -> Result<(usize, u64, u64), HarnessError> {
    let id = cfg.device.id;
    Ok(match path {
        DeployPath::Dynamic => {
            let t = Instant::now();
            match net.ctl.call(id, Message::ProbeInstall { spec: deploy_probe() })? {
                Message::ProbeInstalled { .. } => {}
                m => return Err(unexpected(id, m)),
            }
            (1, t.elapsed().as_nanos() as u64, 0)
        }
        DeployPath::Static => {
            let t = Instant::now();
            let down = teardown(&mut net.ctl, id, inv)?;
            let mut wall = t.elapsed().as_nanos() as u64;
            let window = (down + inventory_size(inv)) as u64 * opts.rtt_ns;
            net.run_before(net.now() + window);
            let t = Instant::now();
            let (_, up) = load_pipeline(&mut net.ctl, id, cfg)?;
            wall += t.elapsed().as_nanos() as u64;
            (down + up, wall, window)
        }
    })
}

/// Messages a reload of `inv` takes.
fn inventory_size(inv: &Inventory) -> usize {
    inv.handles.len() + inv.slots.len() + inv.tables.len() + inv.entries.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_pipeline_has_three_tables_and_ten_blocks() {
        let cfg = three_table();
        assert_eq!(cfg.tables.len(), 3);
        assert_eq!(cfg.actions.len(), 10);
        let mut d = cfg.build().unwrap();
        let mut pkt = crate::traffic::tcp_packet(3, &[1; 12], 0x02, 64);
        assert_eq!(d.process_packet(1, pkt.clone(), 0).verdict, dnp_core::Verdict::Forward(3));
        pkt[23] = 1;
        assert!(d.process_packet(1, pkt, 0).dropped());
    }

    #[test]
    fn channel_load_matches_direct_build() {
        let cfg = three_table();
        let (net, inv) = network(&cfg).unwrap();
        assert_eq!(net.device(1).snapshot(), cfg.build().unwrap().snapshot());
        assert_eq!(inventory_size(&inv), 1 + 10 + 3 + 8);
    }

    #[test]
    fn teardown_then_reload_restores_the_device() {
        let cfg = three_table();
        let (mut net, inv) = network(&cfg).unwrap();
        let before = net.device(1).snapshot();
        assert_eq!(teardown(&mut net.ctl, 1, &inv).unwrap(), inventory_size(&inv));
        assert_eq!(net.device(1).snapshot(), Device::new(cfg.device.clone()).snapshot());
        load_pipeline(&mut net.ctl, 1, &cfg).unwrap();
        assert_eq!(net.device(1).snapshot(), before);
    }

    #[test]
    fn static_path_interrupts_and_dynamic_does_not() {
        let tr = TrafficProfile { n_flows: 300, rate_pps: 100_000, dsts: vec![1, 2, 3, 4, 5], ..Default::default() };
        let opts = DeployOpts { t0: 5_000_000, rtt_ns: 100_000 };
        let d = measure_deploy(&three_table(), &tr, DeployPath::Dynamic, &opts).unwrap();
        let s = measure_deploy(&three_table(), &tr, DeployPath::Static, &opts).unwrap();
        assert_eq!((d.interruption_window_ns, d.dropped, d.messages), (0, 0, 1));
        assert_eq!(s.messages, 44);
        assert_eq!(s.interruption_window_ns, 4_400_000);
        assert!(s.dropped > 300, "{s:?}");
        assert!(d.virtual_latency_ns < s.virtual_latency_ns);
    }
}
