//! Dynamic network probes.
//!
//! A probe compiles to a short instruction fragment that is spliced into the
//! action behind its attach point, immediately before the action's terminal
//! instruction, plus an optional timer-driven block. Installing a probe is a
//! two-phase affair: [`Device::plan_install`] computes an [`InstallPlan`]
//! without touching the device, and [`Device::commit`] applies it step by step,
//! undoing every applied step if any step fails.
//!
//! Several probes may share an attach point. Their fragments are kept as
//! ordered layers on top of the original action so that any one of them can
//! be removed without disturbing the others.
//!
//! Report layouts (fields in order):
//!
//! | kind            | fields                                 |
//! |-----------------|----------------------------------------|
//! | threshold_push  | flow id, timestamp                     |
//! | timer_poll      | port, count, timestamp                 |
//! | flow_duration   | start, end, duration                   |
//! | queue_watermark | old region, new region, depth, timestamp |
//! | filter          | digest fields, or the mirrored packet  |
//! | latency_sink    | source timestamp, sink timestamp       |

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::device::{Device, EntrySpec, HookKind, MatchKey, Report, DEFAULT_MISS_SLOT};
use crate::error::DeviceError;
use crate::field::FieldRef;
use crate::ids::*;
use crate::pool::{AllocRequest, CounterUnit, TimerMode};
use crate::vm::{
    estimate_throughput, meta, validate_with, ActionBlock, AluOp, Cond, CostProfile, DeviceCaps,
    GenDest, Instruction, Operand, MAX_REPORT_FIELDS, PROBE_ETHERTYPE, PROBE_FIELDS_BIT,
};

/// Packet-match condition gating a fragment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub field: FieldRef,
    pub equals: u64,
}

/// Where the TCP fields used by the stateful probes sit in the packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcpLayout {
    pub proto: FieldRef,
    pub flags: FieldRef,
    pub flow_sig: FieldRef,
}

impl Default for TcpLayout {
    /// Ethernet, IPv4 without options, TCP.
    fn default() -> Self {
        TcpLayout {
            proto: FieldRef::pkt(184, 8),
            flags: FieldRef::pkt(376, 8),
            flow_sig: FieldRef::pkt(208, 96),
        }
    }
}

const TCP_FIN: u64 = 0x01;
const TCP_SYN: u64 = 0x02;
const TCP_ACK: u64 = 0x10;

fn one() -> u32 {
    1
}

fn default_stb_capacity() -> u32 {
    4096
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProbeKind {
    Counter {
        #[serde(default)]
        unit: CounterUnit,
        #[serde(default)]
        condition: Option<Condition>,
    },
    ThresholdPush {
        threshold: u64,
        #[serde(default)]
        flow_id: Option<FieldRef>,
        #[serde(default)]
        unit: CounterUnit,
        #[serde(default)]
        condition: Option<Condition>,
    },
    TimerPoll {
        interval_ns: u64,
        #[serde(default)]
        threshold: u64,
        #[serde(default)]
        unit: CounterUnit,
    },
    FsmHalfOpen {
        #[serde(default)]
        layout: TcpLayout,
        #[serde(default = "default_stb_capacity")]
        capacity: u32,
    },
    FlowDuration {
        #[serde(default)]
        layout: TcpLayout,
    },
    /// Marks default to the port's configured watermarks.
    QueueWatermark {
        #[serde(default)]
        low: Option<u32>,
        #[serde(default)]
        high: Option<u32>,
    },
    Filter {
        #[serde(default)]
        digest_fields: Vec<FieldRef>,
        #[serde(default = "one")]
        sample_n: u32,
        #[serde(default)]
        condition: Option<Condition>,
    },
    LatencySource {
        port: PortId,
        interval_ns: u64,
        #[serde(default)]
        one_shot: bool,
    },
    LatencySink,
}

impl ProbeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeKind::Counter { .. } => "counter",
            ProbeKind::ThresholdPush { .. } => "threshold_push",
            ProbeKind::TimerPoll { .. } => "timer_poll",
            ProbeKind::FsmHalfOpen { .. } => "fsm_half_open",
            ProbeKind::FlowDuration { .. } => "flow_duration",
            ProbeKind::QueueWatermark { .. } => "queue_watermark",
            ProbeKind::Filter { .. } => "filter",
            ProbeKind::LatencySource { .. } => "latency_source",
            ProbeKind::LatencySink => "latency_sink",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttachPoint {
    /// An entry with exactly this key. Created if absent, cloning the
    /// behavior of the covering entry.
    TableEntry {
        table: TableId,
        key: MatchKey,
        #[serde(default)]
        priority: Option<u32>,
    },
    TableMiss { table: TableId },
    PortIngress { port: PortId },
    PortEgress { port: PortId },
    Queue { port: PortId },
    Timer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    pub attach: AttachPoint,
    /// Also splice the fragment into every entry overlapping a created entry.
    #[serde(default)]
    pub extend_overlaps: bool,
}

impl ProbeSpec {
    pub fn new(kind: ProbeKind, attach: AttachPoint) -> Self {
        ProbeSpec { kind, attach, extend_overlaps: false }
    }

    pub fn compatible(&self) -> bool {
        use AttachPoint as A;
        use ProbeKind as K;
        let a = &self.attach;
        match self.kind {
            K::Counter { .. } | K::ThresholdPush { .. } | K::Filter { .. } => matches!(
                a,
                A::TableEntry { .. } | A::TableMiss { .. } | A::PortIngress { .. } | A::PortEgress { .. }
            ),
            K::TimerPoll { .. } => matches!(a, A::PortIngress { .. } | A::PortEgress { .. }),
            K::FsmHalfOpen { .. } => {
                matches!(a, A::TableEntry { .. } | A::TableMiss { .. } | A::PortIngress { .. })
            }
            K::FlowDuration { .. } => matches!(a, A::TableEntry { .. } | A::PortIngress { .. }),
            K::QueueWatermark { .. } => matches!(a, A::Queue { .. }),
            K::LatencySource { .. } => matches!(a, A::Timer),
            K::LatencySink => matches!(a, A::PortIngress { .. }),
        }
    }
}

/// A location whose action a probe augments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loc {
    Entry(EntryId),
    Miss(TableId),
    Hook(PortId, HookKind),
}

/// How the slot serving a location came to carry probe code, which decides
/// how it is torn down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub(crate) enum Origin {
    /// The location's own slot was repointed; `block` is the original.
    Switched { block: BlockId },
    /// The original slot is shared, so the location was moved to a new slot.
    Forked { slot: SlotId },
    /// The probe created the entry.
    CreatedEntry { table: TableId },
    /// The port hook was empty.
    CreatedHook,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub(crate) struct Chain {
    pub slot: SlotId,
    pub base: Vec<Instruction>,
    pub origin: Origin,
    pub layers: Vec<(ProbeId, Vec<Instruction>)>,
    pub current: BlockId,
}

impl Chain {
    fn build(&self) -> ActionBlock {
        splice(&self.base, self.layers.iter().map(|(_, f)| &f[..]))
    }
}

/// Inserts `fragments` in order before the terminal instruction of `base`
/// (or at its end if it has none). Base branches that jump past the splice
/// point are lengthened accordingly.
pub fn splice<'a>(base: &[Instruction], fragments: impl IntoIterator<Item = &'a [Instruction]>) -> ActionBlock {
    let at = match base.last() {
        Some(i) if i.is_terminal() => base.len() - 1,
        _ => base.len(),
    };
    let mut mid: Vec<Instruction> = Vec::new();
    for f in fragments {
        mid.extend_from_slice(f);
    }
    let k = mid.len();
    let mut out = Vec::with_capacity(base.len() + k);
    for (i, ins) in base[..at].iter().enumerate() {
        let mut ins = ins.clone();
        if let Instruction::Branch { offset, .. } = &mut ins {
            if i + *offset as usize > at {
                *offset += k as i16;
            }
        }
        out.push(ins);
    }
    out.extend(mid);
    out.extend_from_slice(&base[at..]);
    ActionBlock::new(out)
}

/// One reversible device mutation.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    Alloc { handle: ResourceHandle, req: AllocRequest },
    Release { handle: ResourceHandle, req: AllocRequest },
    WriteRegister { reg: RegisterId, value: u64, prev: u64 },
    LoadBlock { id: BlockId, block: ActionBlock },
    DeleteBlock { id: BlockId, block: ActionBlock },
    CreateSlot { id: SlotId, block: BlockId },
    DeleteSlot { id: SlotId, block: BlockId },
    SwitchPointer { slot: SlotId, to: BlockId, from: BlockId },
    InsertEntry { table: TableId, id: EntryId, spec: EntrySpec },
    DeleteEntry { table: TableId, id: EntryId, spec: EntrySpec },
    Repoint { loc: Loc, to: Option<SlotId>, from: Option<SlotId> },
    SetTimer { id: TimerId, interval: u64, mode: TimerMode, slot: SlotId },
    CancelTimer { id: TimerId, interval: u64, mode: TimerMode, slot: SlotId },
}

impl Step {
    pub fn inverse(&self) -> Step {
        use Step::*;
        match self.clone() {
            Alloc { handle, req } => Release { handle, req },
            Release { handle, req } => Alloc { handle, req },
            WriteRegister { reg, value, prev } => WriteRegister { reg, value: prev, prev: value },
            LoadBlock { id, block } => DeleteBlock { id, block },
            DeleteBlock { id, block } => LoadBlock { id, block },
            CreateSlot { id, block } => DeleteSlot { id, block },
            DeleteSlot { id, block } => CreateSlot { id, block },
            SwitchPointer { slot, to, from } => SwitchPointer { slot, to: from, from: to },
            InsertEntry { table, id, spec } => DeleteEntry { table, id, spec },
            DeleteEntry { table, id, spec } => InsertEntry { table, id, spec },
            Repoint { loc, to, from } => Repoint { loc, to: from, from: to },
            SetTimer { id, interval, mode, slot } => CancelTimer { id, interval, mode, slot },
            CancelTimer { id, interval, mode, slot } => SetTimer { id, interval, mode, slot },
        }
    }

    /// Steps that change what packets experience.
    pub fn affects_behavior(&self) -> bool {
        matches!(
            self,
            Step::SwitchPointer { .. }
                | Step::InsertEntry { .. }
                | Step::DeleteEntry { .. }
                | Step::Repoint { .. }
                | Step::SetTimer { .. }
                | Step::CancelTimer { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub(crate) struct ProbeRecord {
    pub spec: ProbeSpec,
    pub handles: Vec<ResourceHandle>,
    pub locs: Vec<Loc>,
    pub timer: Option<(TimerId, SlotId, BlockId)>,
    pub subscribers: BTreeSet<AppId>,
    pub created_ts: u64,
    pub cost: CostProfile,
}

/// Public view of an installed probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeInfo {
    pub probe_id: ProbeId,
    pub spec: ProbeSpec,
    pub handles: Vec<ResourceHandle>,
    pub locations: Vec<Loc>,
    pub timer: Option<TimerId>,
    pub subscribers: BTreeSet<AppId>,
    pub created_ts: u64,
    pub cost: CostProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstallPlan {
    pub probe_id: ProbeId,
    pub steps: Vec<Step>,
    /// Inverses of `steps`, in reverse order.
    pub rollback: Vec<Step>,
    /// Per-packet cost the probe adds.
    pub cost_delta: CostProfile,
    /// Entries whose match intersects the target key.
    pub overlaps: Vec<EntryId>,
    pub handles: Vec<ResourceHandle>,
    epoch: u64,
    record: ProbeRecord,
    chains: Vec<(Loc, Chain)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Admission {
    Accept { estimate: f64 },
    Reject { estimate: f64, floor: f64 },
}

impl Admission {
    pub fn accepted(&self) -> bool {
        matches!(self, Admission::Accept { .. })
    }
}

/// Admits iff the throughput estimate with the plan stays at or above the
/// floor.
pub fn admission_check(plan: &InstallPlan, caps: &DeviceCaps, active: &CostProfile) -> Admission {
    let accesses = active.mem_accesses as u64 + plan.cost_delta.mem_accesses as u64;
    let estimate = estimate_throughput(accesses, caps);
    if estimate < caps.throughput_floor {
        Admission::Reject { estimate, floor: caps.throughput_floor }
    } else {
        Admission::Accept { estimate }
    }
}

#[derive(Debug, Clone, Serialize)]
pub(crate) struct ProbeRegistry {
    next_id: u32,
    probes: BTreeMap<ProbeId, ProbeRecord>,
    chains: BTreeMap<Loc, Chain>,
}

impl Default for ProbeRegistry {
    fn default() -> Self {
        ProbeRegistry { next_id: 1, probes: BTreeMap::new(), chains: BTreeMap::new() }
    }
}

impl ProbeRegistry {
    pub fn ids(&self) -> Vec<ProbeId> {
        self.probes.keys().copied().collect()
    }

    pub fn probe_at(&self, loc: Loc) -> Option<ProbeId> {
        self.chains.get(&loc).and_then(|c| c.layers.first()).map(|l| l.0)
    }

    pub fn probe_on_entry(&self, id: EntryId) -> Option<ProbeId> {
        self.probe_at(Loc::Entry(id))
    }

    pub fn probe_on_slot(&self, slot: SlotId) -> Option<ProbeId> {
        self.chains
            .values()
            .find(|c| c.slot == slot)
            .and_then(|c| c.layers.first().map(|l| l.0))
            .or_else(|| {
                self.probes
                    .iter()
                    .find(|(_, r)| r.timer.is_some_and(|t| t.1 == slot))
                    .map(|(p, _)| *p)
            })
    }

    fn active_cost(&self) -> CostProfile {
        self.probes.values().map(|r| r.cost).sum()
    }
}

/// Identifier predictions for a plan, in allocation order.
struct Predict {
    blocks: std::vec::IntoIter<u32>,
    slots: std::vec::IntoIter<u32>,
}

impl Predict {
    fn block(&mut self) -> BlockId {
        BlockId(self.blocks.next().expect("enough predictions"))
    }

    fn slot(&mut self) -> SlotId {
        SlotId(self.slots.next().expect("enough predictions"))
    }
}

/// Compiled probe code before placement.
struct Compiled {
    fragment: Vec<Instruction>,
    timer: Option<(Vec<Instruction>, u64, TimerMode)>,
    init: Vec<(RegisterId, u64)>,
}

fn s(n: u32) -> FieldRef {
    meta::scratch(n)
}

fn imm(v: u64) -> Operand {
    Operand::Imm(v)
}

fn br(cond: Cond, lhs: impl Into<Operand>, rhs: impl Into<Operand>, offset: usize) -> Instruction {
    Instruction::Branch { cond, lhs: lhs.into(), rhs: rhs.into(), offset: offset as i16 }
}

fn report(tag: ProbeId, fields: Vec<Operand>) -> Instruction {
    Instruction::GenPkt { dest: GenDest::Controller, tag: tag.0, fields, mirror: false }
}

fn delta(unit: CounterUnit) -> Operand {
    match unit {
        CounterUnit::Packets => imm(1),
        CounterUnit::Bytes => Operand::PktLen,
    }
}

/// Prefixes `body` with a skip-to-end unless `cond` holds.
fn gated(cond: Option<Condition>, body: Vec<Instruction>) -> Vec<Instruction> {
    match cond {
        None => body,
        Some(c) => {
            let mut out = vec![br(Cond::Ne, c.field, imm(c.equals), body.len() + 1)];
            out.extend(body);
            out
        }
    }
}

fn bad(msg: impl Into<String>) -> DeviceError {
    DeviceError::BadProbeSpec(msg.into())
}

impl Device {
    pub(crate) fn probe_on_table(&self, table: TableId) -> Option<ProbeId> {
        self.probes.chains.iter().find_map(|(loc, c)| {
            let hit = match loc {
                Loc::Miss(t) => *t == table,
                Loc::Entry(e) => self.entry_loc.get(e) == Some(&table),
                Loc::Hook(..) => false,
            };
            if hit {
                c.layers.first().map(|l| l.0)
            } else {
                None
            }
        })
    }

    pub fn probe_ids(&self) -> Vec<ProbeId> {
        self.probes.ids()
    }

    pub fn probe(&self, id: ProbeId) -> Result<ProbeInfo, DeviceError> {
        let r = self.probes.probes.get(&id).ok_or(DeviceError::NoSuchProbe(id))?;
        Ok(ProbeInfo {
            probe_id: id,
            spec: r.spec.clone(),
            handles: r.handles.clone(),
            locations: r.locs.clone(),
            timer: r.timer.map(|t| t.0),
            subscribers: r.subscribers.clone(),
            created_ts: r.created_ts,
            cost: r.cost,
        })
    }

    /// Sum of the per-packet cost of every installed probe.
    pub fn active_cost(&self) -> CostProfile {
        self.probes.active_cost()
    }

    fn resource_requests(&self, kind: &ProbeKind) -> Vec<AllocRequest> {
        use ProbeKind as K;
        match kind {
            K::Counter { unit, .. } | K::ThresholdPush { unit, .. } | K::TimerPoll { unit, .. } => {
                vec![AllocRequest::Counter { unit: *unit }]
            }
            K::FsmHalfOpen { layout, capacity } => vec![
                AllocRequest::Counter { unit: CounterUnit::Packets },
                AllocRequest::StateTable { key_width: layout.flow_sig.len, capacity: *capacity },
            ],
            K::FlowDuration { .. } => vec![AllocRequest::Register, AllocRequest::Register],
            K::QueueWatermark { .. } => vec![AllocRequest::Register],
            K::Filter { sample_n, .. } if *sample_n > 1 => vec![AllocRequest::Sampler],
            K::Filter { .. } | K::LatencySource { .. } | K::LatencySink => vec![],
        }
    }

    fn predict_handles(&self, reqs: &[AllocRequest]) -> Result<Vec<ResourceHandle>, DeviceError> {
        let mut out = Vec::new();
        let mut used: BTreeMap<ResourceClass, usize> = BTreeMap::new();
        for r in reqs {
            let class = r.class();
            let n = used.entry(class).or_default();
            let free = self.pool.peek_free(class, *n + 1);
            let idx = *free
                .get(*n)
                .ok_or(DeviceError::Pool(crate::pool::PoolError::PoolExhausted(class)))?;
            *n += 1;
            out.push(ResourceHandle::from_parts(class, idx).expect("pool classes have handles"));
        }
        Ok(out)
    }

    fn compile(&self, id: ProbeId, spec: &ProbeSpec, h: &[ResourceHandle]) -> Result<Compiled, DeviceError> {
        use Instruction as I;
        use ProbeKind as K;
        let counter = |i: usize| match h[i] {
            ResourceHandle::Counter(c) => c,
            _ => unreachable!("counter handle"),
        };
        let register = |i: usize| match h[i] {
            ResourceHandle::Register(r) => r,
            _ => unreachable!("register handle"),
        };
        let mut out = Compiled { fragment: vec![], timer: None, init: vec![] };
        match &spec.kind {
            K::Counter { unit, condition } => {
                out.fragment = gated(
                    *condition,
                    vec![I::CntrAdd { counter: counter(0), delta: delta(*unit), dst: None }],
                );
            }
            K::ThresholdPush { threshold, flow_id, unit, condition } => {
                if *threshold == 0 {
                    return Err(bad("threshold must be positive"));
                }
                let c = counter(0);
                let flow = flow_id.map(Operand::Field).unwrap_or(imm(0));
                out.fragment = gated(
                    *condition,
                    vec![
                        I::CntrAdd { counter: c, delta: delta(*unit), dst: Some(s(0)) },
                        br(Cond::Lt, s(0), imm(*threshold), 4),
                        I::Timestamp { dst: s(1) },
                        report(id, vec![flow, s(1).into()]),
                        I::CntrSet { counter: c, value: imm(0) },
                    ],
                );
            }
            K::TimerPoll { interval_ns, threshold, unit } => {
                if *interval_ns == 0 {
                    return Err(bad("interval must be positive"));
                }
                let port = match spec.attach {
                    AttachPoint::PortIngress { port } | AttachPoint::PortEgress { port } => port,
                    _ => 0,
                };
                let c = counter(0);
                out.fragment = vec![I::CntrAdd { counter: c, delta: delta(*unit), dst: None }];
                let poll = vec![
                    I::CntrAdd { counter: c, delta: imm(0), dst: Some(s(0)) },
                    br(Cond::Lt, s(0), imm(*threshold), 3),
                    I::Timestamp { dst: s(1) },
                    report(id, vec![imm(port as u64), s(0).into(), s(1).into()]),
                    I::CntrSet { counter: c, value: imm(0) },
                ];
                out.timer = Some((poll, *interval_ns, TimerMode::Periodic));
            }
            K::FsmHalfOpen { layout, .. } => {
                let c = counter(0);
                let ResourceHandle::StateTable(t) = h[1] else { unreachable!("stb handle") };
                let sig = Operand::Field(layout.flow_sig);
                let end = 10;
                out.fragment = vec![
                    br(Cond::Ne, layout.proto, imm(6), end),
                    I::Alu { op: AluOp::And, dst: s(0), lhs: layout.flags.into(), rhs: imm(TCP_SYN | TCP_ACK) },
                    br(Cond::Ne, s(0), imm(TCP_SYN), 4),
                    I::StbInsert { stb: t, key: sig, value: imm(1), dst: Some(s(1)) },
                    I::CntrAdd { counter: c, delta: s(1).into(), dst: None },
                    br(Cond::Eq, imm(0), imm(0), end - 5),
                    br(Cond::Ne, s(0), imm(TCP_ACK), end - 6),
                    I::StbDelete { stb: t, key: sig, dst: Some(s(1)) },
                    I::Alu { op: AluOp::Sub, dst: s(2), lhs: imm(0), rhs: s(1).into() },
                    I::CntrAdd { counter: c, delta: s(2).into(), dst: None },
                ];
                debug_assert_eq!(out.fragment.len(), end);
            }
            K::FlowDuration { layout } => {
                let (state, ts) = (register(0), register(1));
                let end = 17;
                out.fragment = vec![
                    br(Cond::Ne, layout.proto, imm(6), end),
                    I::Alu { op: AluOp::And, dst: s(0), lhs: layout.flags.into(), rhs: imm(TCP_SYN | TCP_FIN) },
                    I::RegRead { reg: state, dst: s(1) },
                    br(Cond::Ne, s(0), imm(TCP_SYN), 6),
                    br(Cond::Eq, s(1), imm(1), end - 4),
                    I::Timestamp { dst: s(2) },
                    I::RegWrite { reg: ts, src: s(2).into() },
                    I::RegWrite { reg: state, src: imm(1) },
                    br(Cond::Eq, imm(0), imm(0), end - 8),
                    br(Cond::Ne, s(0), imm(TCP_FIN), end - 9),
                    br(Cond::Ne, s(1), imm(1), end - 10),
                    I::RegRead { reg: ts, dst: s(2) },
                    I::Timestamp { dst: s(3) },
                    I::Alu { op: AluOp::Sub, dst: s(4), lhs: s(3).into(), rhs: s(2).into() },
                    report(id, vec![s(2).into(), s(3).into(), s(4).into()]),
                    I::RegWrite { reg: state, src: imm(0) },
                    I::RegWrite { reg: ts, src: imm(0) },
                ];
                debug_assert_eq!(out.fragment.len(), end);
            }
            K::QueueWatermark { low, high } => {
                let AttachPoint::Queue { port } = spec.attach else { unreachable!("matrix") };
                let cfg = self.port_config(port)?;
                let lo = low.unwrap_or(cfg.low_watermark);
                let hi = high.unwrap_or(cfg.high_watermark);
                if lo == 0 || lo > hi {
                    return Err(bad(format!("watermarks need 0 < low <= high, got {lo}/{hi}")));
                }
                let region = register(0);
                let depth = Operand::Field(meta::QUEUE_DEPTH);
                out.fragment = vec![
                    I::SetField { dst: s(0), imm: 0 },
                    br(Cond::Lt, depth, imm(lo as u64), 2),
                    I::Alu { op: AluOp::Add, dst: s(0), lhs: s(0).into(), rhs: imm(1) },
                    br(Cond::Lt, depth, imm(hi as u64 + 1), 2),
                    I::Alu { op: AluOp::Add, dst: s(0), lhs: s(0).into(), rhs: imm(1) },
                    I::RegRead { reg: region, dst: s(1) },
                    br(Cond::Eq, s(0), s(1), 4),
                    I::Timestamp { dst: s(2) },
                    I::RegWrite { reg: region, src: s(0).into() },
                    report(id, vec![s(1).into(), s(0).into(), depth, s(2).into()]),
                ];
                let d = self.queue_depth(port)?;
                let initial = (d >= lo) as u64 + (d > hi) as u64;
                if initial != 0 {
                    out.init.push((region, initial));
                }
            }
            K::Filter { digest_fields, sample_n, condition } => {
                if *sample_n == 0 {
                    return Err(bad("sample_n must be at least 1"));
                }
                if digest_fields.len() > MAX_REPORT_FIELDS {
                    return Err(bad(format!("at most {MAX_REPORT_FIELDS} digest fields")));
                }
                let mut body = Vec::new();
                if *sample_n > 1 {
                    let ResourceHandle::Sampler(sm) = h[0] else { unreachable!("sampler handle") };
                    body.push(I::SampleTest { sampler: sm, n: *sample_n, dst: s(0) });
                    body.push(br(Cond::Eq, s(0), imm(0), 2));
                }
                body.push(I::GenPkt {
                    dest: GenDest::Controller,
                    tag: id.0,
                    fields: digest_fields.iter().map(|f| Operand::Field(*f)).collect(),
                    mirror: digest_fields.is_empty(),
                });
                out.fragment = gated(*condition, body);
            }
            K::LatencySource { port, interval_ns, one_shot } => {
                if *interval_ns == 0 {
                    return Err(bad("interval must be positive"));
                }
                self.port_config(*port)?;
                let block = vec![
                    I::Timestamp { dst: s(0) },
                    I::GenPkt { dest: GenDest::Port(*port), tag: id.0, fields: vec![s(0).into()], mirror: false },
                ];
                let mode = if *one_shot { TimerMode::OneShot } else { TimerMode::Periodic };
                out.timer = Some((block, *interval_ns, mode));
            }
            K::LatencySink => {
                let end = 6;
                out.fragment = vec![
                    br(Cond::Lt, Operand::PktLen, imm((PROBE_FIELDS_BIT / 8 + 8) as u64), end),
                    br(Cond::Ne, FieldRef::pkt(96, 16), imm(PROBE_ETHERTYPE as u64), end - 1),
                    I::Timestamp { dst: s(0) },
                    I::Move { dst: s(1), src: FieldRef::pkt(PROBE_FIELDS_BIT, 64) },
                    report(id, vec![s(1).into(), s(0).into()]),
                    I::Drop,
                ];
                debug_assert_eq!(out.fragment.len(), end);
            }
        }
        Ok(out)
    }

    /// The locations `spec` augments, plus an entry to create if the target
    /// entry does not exist, and the overlapping entries.
    #[allow(clippy::type_complexity)]
    fn resolve_attach(
        &self,
        spec: &ProbeSpec,
    ) -> Result<(Vec<Loc>, Option<(TableId, EntrySpec, Vec<Instruction>)>, Vec<EntryId>), DeviceError> {
        Ok(match spec.attach {
            AttachPoint::TableEntry { table, key, priority } => {
                let t = self.table(table)?;
                if key.mask & !crate::field::width_mask(t.width) != 0 {
                    return Err(DeviceError::KeyWidthMismatch);
                }
                let existing = t
                    .entries
                    .iter()
                    .find(|e| e.key == key && priority.is_none_or(|p| p == e.priority));
                let mut overlaps: Vec<EntryId> = t
                    .entries
                    .iter()
                    .filter(|e| e.key.intersects(&key) && Some(e.id) != existing.map(|x| x.id))
                    .map(|e| e.id)
                    .collect();
                overlaps.sort();
                match existing {
                    Some(e) => {
                        let mut locs = vec![Loc::Entry(e.id)];
                        if spec.extend_overlaps {
                            locs.extend(overlaps.iter().map(|o| Loc::Entry(*o)));
                        }
                        (locs, None, overlaps)
                    }
                    None => {
                        let cover = t.entries.iter().find(|e| e.key.covers(&key));
                        let (base_slot, params, prio) = match cover {
                            Some(c) => (c.action, c.params.clone(), c.priority.saturating_add(1)),
                            None if t.miss == DEFAULT_MISS_SLOT => return Err(DeviceError::NoCoveringBehavior),
                            None => (t.miss, vec![], 0),
                        };
                        let prio = priority.unwrap_or(prio);
                        if t.entries.iter().any(|e| e.key == key && e.priority == prio) {
                            return Err(DeviceError::DuplicateEntry);
                        }
                        if t.entries.len() >= t.def.max_entries as usize {
                            return Err(DeviceError::TableFull(table));
                        }
                        let base = self.chain_base(base_slot)?;
                        let entry = EntrySpec { priority: prio, key, action: SlotId(u32::MAX), params };
                        let locs = if spec.extend_overlaps {
                            overlaps.iter().map(|o| Loc::Entry(*o)).collect()
                        } else {
                            vec![]
                        };
                        (locs, Some((table, entry, base)), overlaps)
                    }
                }
            }
            AttachPoint::TableMiss { table } => {
                self.table(table)?;
                (vec![Loc::Miss(table)], None, vec![])
            }
            AttachPoint::PortIngress { port } => {
                self.port_config(port)?;
                (vec![Loc::Hook(port, HookKind::Ingress)], None, vec![])
            }
            AttachPoint::PortEgress { port } => {
                self.port_config(port)?;
                (vec![Loc::Hook(port, HookKind::Egress)], None, vec![])
            }
            AttachPoint::Queue { port } => {
                self.port_config(port)?;
                (vec![Loc::Hook(port, HookKind::Enqueue), Loc::Hook(port, HookKind::Dequeue)], None, vec![])
            }
            AttachPoint::Timer => (vec![], None, vec![]),
        })
    }

    /// The unaugmented behavior behind `slot`: a chain's base if the slot
    /// already carries probes, else its block.
    fn chain_base(&self, slot: SlotId) -> Result<Vec<Instruction>, DeviceError> {
        if let Some(c) = self.probes.chains.values().find(|c| c.slot == slot) {
            return Ok(c.base.clone());
        }
        Ok(self.block(self.slot_block(slot)?)?.instructions.clone())
    }

    fn loc_slot(&self, loc: Loc) -> Result<Option<SlotId>, DeviceError> {
        Ok(match loc {
            Loc::Entry(e) => Some(self.entry(e)?.action),
            Loc::Miss(t) => Some(self.table(t)?.miss),
            Loc::Hook(p, k) => self.hook(p, k)?,
        })
    }

    fn checked_block(&self, block: ActionBlock) -> Result<ActionBlock, DeviceError> {
        validate_with(&block, &self.limits)?;
        Ok(block)
    }

    /// Computes the mutations that install `spec`. Does not modify the device.
    pub fn plan_install(&self, spec: &ProbeSpec) -> Result<InstallPlan, DeviceError> {
        if !spec.compatible() {
            return Err(DeviceError::IncompatibleAttachPoint);
        }
        let id = ProbeId(self.probes.next_id);
        let reqs = self.resource_requests(&spec.kind);
        let handles = self.predict_handles(&reqs)?;
        let compiled = self.compile(id, spec, &handles)?;
        let (locs, create, overlaps) = self.resolve_attach(spec)?;

        let n = locs.len() + 2;
        let mut ids = Predict {
            blocks: self.block_ids.peek(n).into_iter(),
            slots: self.slot_ids.peek(n).into_iter(),
        };
        let mut setup = Vec::new();
        let mut loads = Vec::new();
        let mut slots = Vec::new();
        let mut timers = Vec::new();
        let mut switches = Vec::new();
        let mut cleanup = Vec::new();
        let mut chains = Vec::new();
        let frag = &compiled.fragment;

        for (h, req) in handles.iter().zip(&reqs) {
            setup.push(Step::Alloc { handle: *h, req: *req });
        }
        for (reg, value) in &compiled.init {
            setup.push(Step::WriteRegister { reg: *reg, value: *value, prev: 0 });
        }

        let mut all_locs = locs.clone();
        if let Some((table, entry, base)) = create {
            let eid = EntryId(self.entry_ids.peek(1)[0]);
            let block = self.checked_block(splice(&base, [&frag[..]]))?;
            let (b, sl) = (ids.block(), ids.slot());
            loads.push(Step::LoadBlock { id: b, block });
            slots.push(Step::CreateSlot { id: sl, block: b });
            switches.push(Step::InsertEntry { table, id: eid, spec: EntrySpec { action: sl, ..entry } });
            let chain = Chain {
                slot: sl,
                base,
                origin: Origin::CreatedEntry { table },
                layers: vec![(id, frag.clone())],
                current: b,
            };
            chains.push((Loc::Entry(eid), chain));
            all_locs.insert(0, Loc::Entry(eid));
        }

        for loc in locs {
            if let Some(existing) = self.probes.chains.get(&loc) {
                let mut c = existing.clone();
                c.layers.push((id, frag.clone()));
                let block = self.checked_block(c.build())?;
                let b = ids.block();
                loads.push(Step::LoadBlock { id: b, block });
                switches.push(Step::SwitchPointer { slot: c.slot, to: b, from: c.current });
                let old = self.block(c.current)?.clone();
                cleanup.push(Step::DeleteBlock { id: c.current, block: old });
                c.current = b;
                chains.push((loc, c));
                continue;
            }
            let slot = self.loc_slot(loc)?;
            let base = match slot {
                Some(s) => self.block(self.slot_block(s)?)?.instructions.clone(),
                None => vec![],
            };
            let block = self.checked_block(splice(&base, [&frag[..]]))?;
            let b = ids.block();
            loads.push(Step::LoadBlock { id: b, block });
            let exclusive = |s: SlotId| s != DEFAULT_MISS_SLOT && self.slots[&s].refs == 1;
            let (chain_slot, origin) = match slot {
                Some(s) if exclusive(s) => {
                    let orig = self.slot_block(s)?;
                    switches.push(Step::SwitchPointer { slot: s, to: b, from: orig });
                    (s, Origin::Switched { block: orig })
                }
                Some(s) => {
                    let sl = ids.slot();
                    slots.push(Step::CreateSlot { id: sl, block: b });
                    switches.push(Step::Repoint { loc, to: Some(sl), from: Some(s) });
                    (sl, Origin::Forked { slot: s })
                }
                None => {
                    let sl = ids.slot();
                    slots.push(Step::CreateSlot { id: sl, block: b });
                    switches.push(Step::Repoint { loc, to: Some(sl), from: None });
                    (sl, Origin::CreatedHook)
                }
            };
            chains.push((loc, Chain { slot: chain_slot, base, origin, layers: vec![(id, frag.clone())], current: b }));
        }

        let mut timer = None;
        if let Some((code, interval, mode)) = &compiled.timer {
            let block = self.checked_block(ActionBlock::new(code.clone()))?;
            let (b, sl) = (ids.block(), ids.slot());
            let tid = TimerId(
                *self
                    .pool
                    .peek_free(ResourceClass::Timer, 1)
                    .first()
                    .ok_or(DeviceError::Pool(crate::pool::PoolError::PoolExhausted(ResourceClass::Timer)))?,
            );
            loads.push(Step::LoadBlock { id: b, block });
            slots.push(Step::CreateSlot { id: sl, block: b });
            timers.push(Step::SetTimer { id: tid, interval: *interval, mode: *mode, slot: sl });
            timer = Some((tid, sl, b));
        }

        let mut steps = setup;
        steps.extend(loads);
        steps.extend(slots);
        steps.extend(timers);
        steps.extend(switches);
        steps.extend(cleanup);
        let rollback = steps.iter().rev().map(Step::inverse).collect();

        let per_pkt = CostProfile::of_instructions(frag);
        let cost_delta = match spec.attach {
            AttachPoint::Queue { .. } => per_pkt + per_pkt,
            _ => per_pkt,
        };
        let record = ProbeRecord {
            spec: spec.clone(),
            handles: handles.clone(),
            locs: all_locs,
            timer,
            subscribers: BTreeSet::new(),
            created_ts: self.now(),
            cost: cost_delta,
        };
        Ok(InstallPlan { probe_id: id, steps, rollback, cost_delta, overlaps, handles, epoch: self.epoch, record, chains })
    }

    pub fn admission_check(&self, plan: &InstallPlan) -> Admission {
        admission_check(plan, self.caps(), &self.active_cost())
    }

    pub(crate) fn apply_step(&mut self, step: &Step) -> Result<(), DeviceError> {
        match step.clone() {
            Step::Alloc { handle, req } => {
                let got = self.alloc(req)?;
                if got != handle {
                    self.pool.release(got)?;
                    return Err(DeviceError::StaleRequest);
                }
            }
            Step::Release { handle, .. } => self.release(handle)?,
            Step::WriteRegister { reg, value, .. } => {
                self.pool.write_register(reg, value)?;
            }
            Step::LoadBlock { id, block } => {
                self.load_block_at(id, block)?;
            }
            Step::DeleteBlock { id, .. } => {
                self.delete_block(id)?;
            }
            Step::CreateSlot { id, block } => {
                self.create_slot_at(id, block)?;
            }
            Step::DeleteSlot { id, .. } => {
                self.delete_slot(id)?;
            }
            Step::SwitchPointer { slot, to, .. } => {
                self.switch_action_pointer_raw(slot, to)?;
            }
            Step::InsertEntry { table, id, spec } => {
                self.insert_entry_at(table, id, spec)?;
            }
            Step::DeleteEntry { id, .. } => {
                self.delete_entry_raw(id)?;
            }
            Step::Repoint { loc, to, .. } => match loc {
                Loc::Entry(e) => {
                    self.modify_entry_raw(e, Some(to.ok_or(DeviceError::Unsupported)?), None)?;
                }
                Loc::Miss(t) => {
                    self.set_table_miss_raw(t, to.ok_or(DeviceError::Unsupported)?)?;
                }
                Loc::Hook(p, k) => {
                    self.set_hook(p, k, to)?;
                }
            },
            Step::SetTimer { id, interval, mode, slot } => {
                self.set_timer_at(id, interval, mode, slot)?;
            }
            Step::CancelTimer { id, .. } => {
                self.cancel_timer(id)?;
            }
        }
        Ok(())
    }

    /// Applies `steps` in order. On failure every applied step is undone in
    /// reverse order before the error is returned.
    fn run_steps(&mut self, steps: &[Step], fault: Option<usize>) -> Result<(), DeviceError> {
        for (i, st) in steps.iter().enumerate() {
            let r = if fault == Some(i) { Err(DeviceError::InjectedFault) } else { self.apply_step(st) };
            if let Err(cause) = r {
                for done in steps[..i].iter().rev() {
                    self.apply_step(&done.inverse()).expect("inverse of an applied step succeeds");
                }
                return Err(DeviceError::CommitFailed { step: i, cause: Box::new(cause) });
            }
        }
        Ok(())
    }

    /// Applies a plan made against the current device state.
    pub fn commit(&mut self, plan: InstallPlan) -> Result<ProbeId, DeviceError> {
        if plan.epoch != self.epoch {
            return Err(DeviceError::StaleRequest);
        }
        let fault = self.fault_at_step.take();
        self.run_steps(&plan.steps, fault)?;
        let id = plan.probe_id;
        self.probes.next_id = id.0 + 1;
        self.probes.chains.extend(plan.chains);
        self.probes.probes.insert(id, plan.record);
        Ok(id)
    }

    /// Plans, admits and commits `spec`.
    pub fn install(&mut self, spec: &ProbeSpec) -> Result<ProbeId, DeviceError> {
        let plan = self.plan_install(spec)?;
        if let Admission::Reject { estimate, floor } = self.admission_check(&plan) {
            return Err(DeviceError::AdmissionRejected { estimate, floor });
        }
        self.commit(plan)
    }

    /// Removes a probe, restores the actions it augmented, and returns its
    /// resources to the pool. Fails while the probe has subscribers unless
    /// `force` is set.
    pub fn revoke(&mut self, id: ProbeId, force: bool) -> Result<(), DeviceError> {
        let rec = self.probes.probes.get(&id).ok_or(DeviceError::NoSuchProbe(id))?;
        if !rec.subscribers.is_empty() && !force {
            return Err(DeviceError::HasSubscribers(id));
        }
        let rec = rec.clone();
        let mut steps = Vec::new();
        let mut chains = Vec::new();
        let mut fresh = self.block_ids.peek(rec.locs.len() + 1).into_iter();
        for loc in &rec.locs {
            let Some(chain) = self.probes.chains.get(loc) else { continue };
            let mut c = chain.clone();
            c.layers.retain(|(p, _)| *p != id);
            let old = self.block(c.current)?.clone();
            if !c.layers.is_empty() {
                let b = BlockId(fresh.next().expect("enough predictions"));
                steps.push(Step::LoadBlock { id: b, block: c.build() });
                steps.push(Step::SwitchPointer { slot: c.slot, to: b, from: c.current });
                steps.push(Step::DeleteBlock { id: c.current, block: old });
                c.current = b;
                chains.push((*loc, Some(c)));
                continue;
            }
            let cur = self.slot_block(c.slot)?;
            match c.origin {
                Origin::Switched { block } => {
                    steps.push(Step::SwitchPointer { slot: c.slot, to: block, from: cur });
                }
                Origin::Forked { slot } => {
                    steps.push(Step::Repoint { loc: *loc, to: Some(slot), from: Some(c.slot) });
                    steps.push(Step::DeleteSlot { id: c.slot, block: cur });
                }
                Origin::CreatedEntry { table } => {
                    let Loc::Entry(e) = *loc else { unreachable!("created entries live at entries") };
                    let fe = self.entry(e)?;
                    let spec = EntrySpec { priority: fe.priority, key: fe.key, action: fe.action, params: fe.params.clone() };
                    steps.push(Step::DeleteEntry { table, id: e, spec });
                    steps.push(Step::DeleteSlot { id: c.slot, block: cur });
                }
                Origin::CreatedHook => {
                    steps.push(Step::Repoint { loc: *loc, to: None, from: Some(c.slot) });
                    steps.push(Step::DeleteSlot { id: c.slot, block: cur });
                }
            }
            steps.push(Step::DeleteBlock { id: c.current, block: old });
            chains.push((*loc, None));
        }
        if let Some((tid, slot, block)) = rec.timer {
            if let Some(t) = self.pool.timer(tid) {
                if t.linked_action == slot {
                    steps.push(Step::CancelTimer { id: tid, interval: t.interval, mode: t.mode, slot });
                }
            }
            steps.push(Step::DeleteSlot { id: slot, block });
            steps.push(Step::DeleteBlock { id: block, block: self.block(block)?.clone() });
        }
        for (h, req) in rec.handles.iter().zip(self.resource_requests(&rec.spec.kind)) {
            steps.push(Step::Release { handle: *h, req });
        }
        self.run_steps(&steps, None)?;
        for (loc, c) in chains {
            match c {
                Some(c) => self.probes.chains.insert(loc, c),
                None => self.probes.chains.remove(&loc),
            };
        }
        self.probes.probes.remove(&id);
        Ok(())
    }

    /// Adds a subscriber; returns the subscriber count.
    pub fn subscribe(&mut self, id: ProbeId, app: AppId) -> Result<usize, DeviceError> {
        let r = self.probes.probes.get_mut(&id).ok_or(DeviceError::NoSuchProbe(id))?;
        r.subscribers.insert(app);
        Ok(r.subscribers.len())
    }

    pub fn unsubscribe(&mut self, id: ProbeId, app: AppId) -> Result<usize, DeviceError> {
        let r = self.probes.probes.get_mut(&id).ok_or(DeviceError::NoSuchProbe(id))?;
        r.subscribers.remove(&app);
        Ok(r.subscribers.len())
    }

    /// Pairs each probe report with every subscriber of its probe.
    pub fn fan_out(&self, reports: &[Report]) -> Vec<(AppId, Report)> {
        let mut out = Vec::new();
        for r in reports {
            if let Some(p) = self.probes.probes.get(&ProbeId(r.tag)) {
                out.extend(p.subscribers.iter().map(|a| (*a, r.clone())));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{DeviceConfig, PortConfig, TableDef, Position, Verdict};
    use crate::pool::PoolConfig;
    use crate::vm::assemble;

    fn dev() -> Device {
        Device::new(DeviceConfig::new(1, [1, 2, 3]))
    }

    fn fwd_table(d: &mut Device) -> (TableId, SlotId, EntryId) {
        let t = d.create_table(TableDef::new(0, vec![FieldRef::pkt(0, 8)]), Position::End).unwrap();
        let (s, _) = d.load_action(assemble("OUTPUT #2").unwrap()).unwrap();
        let e = d.insert_entry(t, EntrySpec { priority: 0, key: MatchKey::any(), action: s, params: vec![] }).unwrap();
        (t, s, e)
    }

    fn counter(attach: AttachPoint) -> ProbeSpec {
        ProbeSpec::new(ProbeKind::Counter { unit: CounterUnit::Packets, condition: None }, attach)
    }

    #[test]
    fn splice_before_terminal_and_fix_branches() {
        let base = assemble("BRANCH_EQ #0, #1, +2\nNOP\nOUTPUT #2").unwrap();
        let frag = assemble("NOP\nNOP").unwrap();
        let out = splice(&base.instructions, [&frag.instructions[..]]);
        assert_eq!(out.instructions.len(), 5);
        assert_eq!(out.instructions[0], br(Cond::Eq, imm(0), imm(1), 2));
        let base = assemble("BRANCH_EQ #0, #1, +3\nNOP\nNOP\nOUTPUT #2").unwrap();
        let out = splice(&base.instructions, [&frag.instructions[..]]);
        assert_eq!(out.instructions[0], br(Cond::Eq, imm(0), imm(1), 3));
        let base = assemble("NOP").unwrap();
        assert_eq!(splice(&base.instructions, [&frag.instructions[..]]).instructions.len(), 3);
    }

    #[test]
    fn counter_plan_on_existing_entry() {
        let mut d = dev();
        let (_, s, e) = fwd_table(&mut d);
        let plan = d.plan_install(&counter(AttachPoint::TableEntry { table: 0, key: MatchKey::any(), priority: None })).unwrap();
        let ops: Vec<_> = plan
            .steps
            .iter()
            .map(|s| match s {
                Step::Alloc { .. } => "alloc",
                Step::LoadBlock { .. } => "load",
                Step::SwitchPointer { .. } => "switch",
                _ => "other",
            })
            .collect();
        assert_eq!(ops, ["alloc", "load", "switch"]);
        let Step::LoadBlock { block, .. } = &plan.steps[1] else { panic!() };
        assert_eq!(block, &assemble("CNTR_ADD c0, #1\nOUTPUT #2").unwrap());
        let before = d.snapshot().to_bytes();
        let pid = d.commit(plan).unwrap();
        for _ in 0..5 {
            assert_eq!(d.process_packet(1, vec![0; 64], 0).verdict, Verdict::Forward(2));
        }
        assert_eq!(d.read_counter(CounterId(0)).unwrap().0, 5);
        assert_eq!(d.modify_entry(e, Some(s), None), Err(DeviceError::InUseByProbe(pid)));
        d.revoke(pid, false).unwrap();
        assert_eq!(d.snapshot().to_bytes(), before);
    }

    #[test]
    fn created_entry_clones_cover() {
        let mut d = dev();
        let t = d.create_table(TableDef::new(0, vec![FieldRef::pkt(0, 8)]), Position::End).unwrap();
        let (s, _) = d.load_action(assemble("OUTPUT #2").unwrap()).unwrap();
        let w = d.insert_entry(t, EntrySpec { priority: 5, key: MatchKey::new(0x80, 0x80), action: s, params: vec![] }).unwrap();
        let before = d.snapshot().to_bytes();
        let key = MatchKey::exact(0x81, 8);
        let plan = d.plan_install(&counter(AttachPoint::TableEntry { table: t, key, priority: None })).unwrap();
        assert_eq!(plan.overlaps, vec![w]);
        let pid = d.commit(plan).unwrap();
        let created = d.entries(t).unwrap()[0].clone();
        assert_eq!((created.priority, created.key), (6, key));
        assert_eq!(d.process_packet(1, vec![0x81; 64], 0).verdict, Verdict::Forward(2));
        assert_eq!(d.process_packet(1, vec![0x82; 64], 0).verdict, Verdict::Forward(2));
        assert_eq!(d.read_counter(CounterId(0)).unwrap().0, 1);
        d.revoke(pid, false).unwrap();
        assert_eq!(d.snapshot().to_bytes(), before);

        let miss_only = AttachPoint::TableEntry { table: t, key: MatchKey::exact(0x01, 8), priority: None };
        assert_eq!(d.plan_install(&counter(miss_only)).unwrap_err(), DeviceError::NoCoveringBehavior);
    }

    #[test]
    fn compatibility_matrix() {
        let d = dev();
        let spec = ProbeSpec::new(
            ProbeKind::QueueWatermark { low: Some(1), high: Some(2) },
            AttachPoint::TableEntry { table: 0, key: MatchKey::any(), priority: None },
        );
        assert_eq!(d.plan_install(&spec).unwrap_err(), DeviceError::IncompatibleAttachPoint);
    }

    #[test]
    fn admission_arithmetic() {
        let mut d = dev();
        fwd_table(&mut d);
        d.set_caps(DeviceCaps::new(10_000.0, 1000.0).with_floor(500.0));
        let spec = ProbeSpec::new(
            ProbeKind::Counter { unit: CounterUnit::Packets, condition: None },
            AttachPoint::PortIngress { port: 1 },
        );
        let mut plan = d.plan_install(&spec).unwrap();
        plan.cost_delta.mem_accesses = 3;
        match d.admission_check(&plan) {
            Admission::Reject { estimate, floor } => {
                assert_eq!(estimate.floor(), 333.0);
                assert_eq!(floor, 500.0);
            }
            a => panic!("{a:?}"),
        }
    }

    #[test]
    fn every_fault_point_rolls_back() {
        let specs = [
            counter(AttachPoint::TableEntry { table: 0, key: MatchKey::exact(7, 8), priority: None }),
            ProbeSpec::new(
                ProbeKind::TimerPoll { interval_ns: 1000, threshold: 1, unit: CounterUnit::Packets },
                AttachPoint::PortIngress { port: 1 },
            ),
            ProbeSpec::new(ProbeKind::QueueWatermark { low: Some(1), high: Some(3) }, AttachPoint::Queue { port: 2 }),
            ProbeSpec::new(ProbeKind::FsmHalfOpen { layout: TcpLayout::default(), capacity: 16 }, AttachPoint::TableMiss { table: 0 }),
        ];
        for spec in specs {
            let mut d = dev();
            fwd_table(&mut d);
            let (s2, _) = d.load_action(assemble("OUTPUT #3").unwrap()).unwrap();
            d.set_table_miss(0, s2).unwrap();
            let before = d.snapshot().to_bytes();
            let n = d.plan_install(&spec).unwrap().steps.len();
            for k in 0..n {
                d.inject_fault(Some(k));
                let plan = d.plan_install(&spec).unwrap();
                let err = d.commit(plan).unwrap_err();
                assert!(matches!(err, DeviceError::CommitFailed { step, .. } if step == k));
                assert_eq!(d.snapshot().to_bytes(), before, "{} fault at {k}", spec.kind.name());
            }
            let pid = d.install(&spec).unwrap();
            d.revoke(pid, false).unwrap();
            assert_eq!(d.snapshot().to_bytes(), before);
        }
    }

    #[test]
    fn pool_exhaustion_leaves_state_untouched() {
        let mut d = Device::new(DeviceConfig {
            pool: PoolConfig { counters: 1, ..PoolConfig::default() },
            ..DeviceConfig::new(1, [1, 2])
        });
        fwd_table(&mut d);
        let spec = counter(AttachPoint::PortIngress { port: 1 });
        d.install(&spec).unwrap();
        let before = d.snapshot().to_bytes();
        assert!(matches!(d.install(&spec), Err(DeviceError::Pool(_))));
        assert_eq!(d.snapshot().to_bytes(), before);
    }

    #[test]
    fn stale_plan_is_refused() {
        let mut d = dev();
        fwd_table(&mut d);
        let plan = d.plan_install(&counter(AttachPoint::PortIngress { port: 1 })).unwrap();
        d.alloc(AllocRequest::Register).unwrap();
        assert_eq!(d.commit(plan), Err(DeviceError::StaleRequest));
    }

    #[test]
    fn layered_probes_revoke_in_any_order() {
        let mut d = dev();
        fwd_table(&mut d);
        let before = d.snapshot().to_bytes();
        let at = AttachPoint::TableEntry { table: 0, key: MatchKey::any(), priority: None };
        let a = d.install(&counter(at)).unwrap();
        let b = d.install(&counter(at)).unwrap();
        let c = d.install(&counter(at)).unwrap();
        d.process_packet(1, vec![0; 64], 0);
        for i in 0..3 {
            assert_eq!(d.read_counter(CounterId(i)).unwrap().0, 1);
        }
        d.revoke(b, false).unwrap();
        d.process_packet(1, vec![0; 64], 0);
        assert_eq!(d.read_counter(CounterId(2)).unwrap().0, 2);
        d.revoke(a, false).unwrap();
        d.revoke(c, false).unwrap();
        assert_eq!(d.snapshot().to_bytes(), before);
    }

    #[test]
    fn shared_slot_is_forked() {
        let mut d = dev();
        let (t, s, _) = fwd_table(&mut d);
        d.insert_entry(t, EntrySpec { priority: 1, key: MatchKey::exact(9, 8), action: s, params: vec![] }).unwrap();
        let before = d.snapshot().to_bytes();
        let pid = d.install(&counter(AttachPoint::TableEntry { table: t, key: MatchKey::exact(9, 8), priority: None })).unwrap();
        d.process_packet(1, vec![9; 64], 0);
        d.process_packet(1, vec![8; 64], 0);
        assert_eq!(d.read_counter(CounterId(0)).unwrap().0, 1);
        d.revoke(pid, false).unwrap();
        assert_eq!(d.snapshot().to_bytes(), before);
    }

    #[test]
    fn subscribers_block_revoke_and_fan_out() {
        let mut d = dev();
        fwd_table(&mut d);
        let spec = ProbeSpec::new(
            ProbeKind::ThresholdPush { threshold: 2, flow_id: None, unit: CounterUnit::Packets, condition: None },
            AttachPoint::PortIngress { port: 1 },
        );
        let p = d.install(&spec).unwrap();
        assert_eq!(d.subscribe(p, AppId(1)).unwrap(), 1);
        assert_eq!(d.subscribe(p, AppId(1)).unwrap(), 1);
        assert_eq!(d.subscribe(p, AppId(2)).unwrap(), 2);
        let mut reports = vec![];
        for _ in 0..5 {
            reports.extend(d.process_packet(1, vec![0; 64], 0).effects.reports);
        }
        assert_eq!(reports.len(), 2);
        assert_eq!(d.fan_out(&reports).len(), 4);
        assert_eq!(d.revoke(p, false), Err(DeviceError::HasSubscribers(p)));
        d.unsubscribe(p, AppId(1)).unwrap();
        assert_eq!(d.unsubscribe(p, AppId(2)).unwrap(), 0);
        d.revoke(p, false).unwrap();
        assert_eq!(d.revoke(p, false), Err(DeviceError::NoSuchProbe(p)));
    }

    #[test]
    fn queue_watermark_reports_each_crossing() {
        let mut d = Device::new(DeviceConfig {
            ports: vec![PortConfig { id: 2, queue_capacity: 16, low_watermark: 2, high_watermark: 4 }],
            ..DeviceConfig::new(1, [])
        });
        let p = d.install(&ProbeSpec::new(ProbeKind::QueueWatermark { low: None, high: None }, AttachPoint::Queue { port: 2 })).unwrap();
        let mut reports = vec![];
        for _ in 0..6 {
            reports.extend(d.enqueue(2, vec![0; 64], 0).1.reports);
        }
        for _ in 0..6 {
            reports.extend(d.dequeue(2, 0).unwrap().1.reports);
        }
        let moves: Vec<_> = reports.iter().map(|r| (r.tag, r.fields[0], r.fields[1], r.fields[2])).collect();
        assert_eq!(moves, vec![(p.0, 0, 1, 2), (p.0, 1, 2, 5), (p.0, 2, 1, 4), (p.0, 1, 0, 1)]);
    }

    #[test]
    fn latency_source_and_sink() {
        let mut src = dev();
        fwd_table(&mut src);
        let mut sink = dev();
        fwd_table(&mut sink);
        src.install(&ProbeSpec::new(
            ProbeKind::LatencySource { port: 2, interval_ns: 1000, one_shot: false },
            AttachPoint::Timer,
        ))
        .unwrap();
        let k = sink.install(&ProbeSpec::new(ProbeKind::LatencySink, AttachPoint::PortIngress { port: 1 })).unwrap();
        let eff = src.advance_clock(1000);
        assert_eq!(eff.generated.len(), 1);
        let (port, pkt) = eff.generated[0].clone();
        assert_eq!(port, 2);
        let out = sink.process_packet(1, pkt, 1500);
        assert_eq!(out.verdict, Verdict::Drop(crate::device::DropReason::Action));
        assert_eq!(out.effects.reports[0].tag, k.0);
        assert_eq!(out.effects.reports[0].fields, vec![1000, 1500]);
        // ordinary traffic passes the sink untouched
        assert_eq!(sink.process_packet(1, vec![0; 64], 0).verdict, Verdict::Forward(2));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = ProbeSpec::new(
            ProbeKind::Filter { digest_fields: vec![FieldRef::pkt(208, 32)], sample_n: 4, condition: None },
            AttachPoint::TableEntry { table: 0, key: MatchKey::exact(0x0a, 8), priority: Some(3) },
        );
        let text = toml::to_string(&spec).unwrap();
        assert_eq!(toml::from_str::<ProbeSpec>(&text).unwrap(), spec);
    }
}
