//! A single programmable device: match-action tables, the action store,
//! ports with egress queues, and timers.
//!
//! Every mutation is applied between packets, so each packet observes either
//! the state before a mutation or the state after it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::DeviceError;
use crate::field::{read_bits, width_mask, FieldRef, Space};
use crate::ids::*;
use crate::pool::*;
use crate::probe::{Loc, ProbeRegistry};
use crate::vm::{
    self, execute, is_probe_packet, meta, validate_with, ActionBlock, CostProfile, DeviceCaps,
    Disposition, ExecContext, ExecError, ExecOutcome, GenDest, Instruction, Limits, META_BYTES,
    MAX_PARAM_BYTES,
};

/// Miss action shared by tables that do not name their own.
pub const DEFAULT_MISS_SLOT: SlotId = SlotId(0);
/// Report tag of packet-in reports from the default miss action.
pub const TAG_PACKET_IN: u32 = 0;
/// Report tag of device diagnostics.
pub const TAG_DIAGNOSTIC: u32 = u32::MAX;

/// Diagnostic codes carried in the first field of a diagnostic report.
pub mod diag {
    pub const EXEC_FAULT: u128 = 1;
    pub const STAGE_LIMIT: u128 = 2;
}

/// `u128` as a `0x`-prefixed hex string; plain integers are accepted too.
pub mod hex128 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:#x}"))
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Str(String),
    }

    pub fn parse(s: &str) -> Option<u128> {
        match s.strip_prefix("0x") {
            Some(h) => u128::from_str_radix(h, 16).ok(),
            None => s.parse().ok(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Int(i) => Ok(i as u128),
            Raw::Str(s) => parse(&s).ok_or_else(|| de::Error::custom(format!("bad integer `{s}`"))),
        }
    }
}

/// Ternary match over the concatenated table key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatchKey {
    #[serde(with = "hex128")]
    pub value: u128,
    #[serde(with = "hex128")]
    pub mask: u128,
}

impl MatchKey {
    pub fn new(value: u128, mask: u128) -> Self {
        MatchKey { value: value & mask, mask }
    }

    pub fn exact(value: u128, width: u8) -> Self {
        Self::new(value, width_mask(width))
    }

    pub fn any() -> Self {
        MatchKey { value: 0, mask: 0 }
    }

    pub fn matches(&self, key: u128) -> bool {
        (key ^ self.value) & self.mask == 0
    }

    /// Every key matched by `other` is also matched by `self`.
    pub fn covers(&self, other: &MatchKey) -> bool {
        self.mask & !other.mask == 0 && (self.value ^ other.value) & self.mask == 0
    }

    /// Some key is matched by both.
    pub fn intersects(&self, other: &MatchKey) -> bool {
        (self.value ^ other.value) & self.mask & other.mask == 0
    }

    /// Concatenates per-field `(value, mask)` pairs, first field most significant.
    pub fn concat(parts: &[(u128, u128)], widths: &[u8]) -> Self {
        let mut v = 0u128;
        let mut m = 0u128;
        for ((pv, pm), w) in parts.iter().zip(widths) {
            let shift = |x: u128| if *w >= 128 { 0 } else { x << w };
            v = shift(v) | (pv & width_mask(*w));
            m = shift(m) | (pm & width_mask(*w));
        }
        Self::new(v, m)
    }
}

fn default_max_entries() -> u32 {
    4096
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub id: TableId,
    pub key: Vec<FieldRef>,
    #[serde(default = "default_max_entries")]
    pub max_entries: u32,
    /// Miss action slot; the shared default when absent.
    #[serde(default)]
    pub miss: Option<SlotId>,
    /// Kept for configuration compatibility. Actions cannot write flow
    /// tables; per-flow state lives in pool state tables.
    #[serde(default)]
    pub writable_by_actions: bool,
}

impl TableDef {
    pub fn new(id: TableId, key: Vec<FieldRef>) -> Self {
        TableDef { id, key, max_entries: default_max_entries(), miss: None, writable_by_actions: false }
    }

    pub fn key_width(&self) -> u32 {
        self.key.iter().map(|f| f.len as u32).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEntry {
    pub id: EntryId,
    pub priority: u32,
    pub key: MatchKey,
    pub action: SlotId,
    #[serde(default)]
    pub params: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntrySpec {
    pub priority: u32,
    pub key: MatchKey,
    pub action: SlotId,
    #[serde(default)]
    pub params: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    /// After the last table of the fall-through chain.
    End,
    /// On the edge from `from` to `to`, either the fall-through link or a
    /// GOTO_TABLE issued by one of `from`'s actions.
    Edge { from: TableId, to: TableId },
}

#[derive(Debug, Clone)]
pub(crate) struct Table {
    pub def: TableDef,
    pub width: u8,
    /// Sorted by priority descending, then entry id ascending.
    pub entries: Vec<FlowEntry>,
    pub miss: SlotId,
    pub next: Option<TableId>,
    pub position: Position,
}

impl Table {
    /// Highest priority match, ties to the lowest entry id.
    pub fn lookup(&self, key: u128) -> Option<&FlowEntry> {
        self.entries.iter().find(|e| e.key.matches(key))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookKind {
    Ingress,
    Egress,
    Enqueue,
    Dequeue,
}

impl HookKind {
    pub const ALL: [HookKind; 4] = [HookKind::Ingress, HookKind::Egress, HookKind::Enqueue, HookKind::Dequeue];

    fn idx(self) -> usize {
        self as usize
    }
}

fn default_queue_capacity() -> u32 {
    1024
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortConfig {
    pub id: PortId,
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: u32,
    #[serde(default)]
    pub low_watermark: u32,
    #[serde(default)]
    pub high_watermark: u32,
}

impl PortConfig {
    pub fn new(id: PortId) -> Self {
        let cap = default_queue_capacity();
        PortConfig { id, queue_capacity: cap, low_watermark: cap / 4, high_watermark: cap * 3 / 4 }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Port {
    pub cfg: PortConfig,
    pub hooks: [Option<SlotId>; 4],
    pub queue: VecDeque<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct Slot {
    pub block: BlockId,
    pub refs: u32,
}

#[derive(Debug, Clone)]
pub(crate) struct StoredBlock {
    pub block: ActionBlock,
    pub cost: CostProfile,
    /// Number of slots pointing at this block.
    pub slots: u32,
}

/// Lowest-free identifier allocator with a canonical representation, so two
/// allocators with the same live set compare equal.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub(crate) struct IdAlloc {
    free: BTreeSet<u32>,
    high: u32,
}

impl IdAlloc {
    pub fn is_free(&self, id: u32) -> bool {
        id >= self.high || self.free.contains(&id)
    }

    pub fn take(&mut self, id: u32) -> bool {
        if id >= self.high {
            self.free.extend(self.high..id);
            self.high = id + 1;
            true
        } else {
            self.free.remove(&id)
        }
    }

    pub fn release(&mut self, id: u32) {
        if id < self.high {
            self.free.insert(id);
        }
        while self.high > 0 && self.free.remove(&(self.high - 1)) {
            self.high -= 1;
        }
    }

    pub fn peek(&self, n: usize) -> Vec<u32> {
        self.free.iter().copied().chain(self.high..).take(n).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// An action executed DROP.
    Action,
    /// Traversal fell off the last table.
    EndOfPipeline,
    Malformed,
    StageLimit,
    NoSuchPort,
    NoSuchTable,
    Oversize,
    QueueFull,
    /// A marked probe packet that no sink consumed.
    UnclaimedProbe,
    /// Both the selected action and the miss action faulted.
    Fault,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub device: DeviceId,
    /// Probe id for probe reports; see [`TAG_PACKET_IN`] and [`TAG_DIAGNOSTIC`].
    pub tag: u32,
    pub ts: u64,
    pub fields: Vec<u128>,
    #[serde(default)]
    pub packet: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Effects {
    pub reports: Vec<Report>,
    /// Probe packets the caller must enqueue at the named port.
    pub generated: Vec<(PortId, Vec<u8>)>,
    pub mem_accesses: u64,
}

impl Effects {
    pub fn extend(&mut self, other: Effects) {
        self.reports.extend(other.reports);
        self.generated.extend(other.generated);
        self.mem_accesses += other.mem_accesses;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Forward(PortId),
    Drop(DropReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardingOutcome {
    pub verdict: Verdict,
    pub packet: Vec<u8>,
    pub effects: Effects,
    pub stages: u32,
}

impl ForwardingOutcome {
    pub fn dropped(&self) -> bool {
        matches!(self.verdict, Verdict::Drop(_))
    }

    pub fn emitted(&self) -> Vec<(PortId, &[u8])> {
        match self.verdict {
            Verdict::Forward(p) => vec![(p, &self.packet[..])],
            Verdict::Drop(_) => vec![],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceStats {
    pub rx: u64,
    pub forwarded: u64,
    pub dropped: BTreeMap<DropReason, u64>,
    pub exec_faults: u64,
    pub unclaimed_probe_packets: u64,
    pub reports: u64,
}

impl DeviceStats {
    pub fn drops(&self, r: DropReason) -> u64 {
        self.dropped.get(&r).copied().unwrap_or(0)
    }

    pub fn total_drops(&self) -> u64 {
        self.dropped.values().sum()
    }
}

fn default_max_stages() -> u32 {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub id: DeviceId,
    #[serde(default)]
    pub ports: Vec<PortConfig>,
    #[serde(default)]
    pub caps: DeviceCaps,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default = "default_max_stages")]
    pub max_stages: u32,
    #[serde(default = "default_mtu")]
    pub mtu: usize,
}

fn default_mtu() -> usize {
    2048
}

impl DeviceConfig {
    pub fn new(id: DeviceId, ports: impl IntoIterator<Item = PortId>) -> Self {
        DeviceConfig {
            id,
            ports: ports.into_iter().map(PortConfig::new).collect(),
            caps: DeviceCaps::default(),
            pool: PoolConfig::default(),
            max_stages: default_max_stages(),
            mtu: default_mtu(),
        }
    }
}

/// Serializable view of everything installed on a device. Counter and
/// register contents, queue contents, and statistics are excluded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceSnapshot {
    pub entry_table: Option<TableId>,
    pub tables: Vec<TableSnapshot>,
    pub redirects: Vec<(TableId, TableId, TableId)>,
    pub slots: Vec<(SlotId, BlockId, u32)>,
    pub blocks: Vec<(BlockId, ActionBlock)>,
    pub hooks: Vec<(PortId, [Option<SlotId>; 4])>,
    pub pool: PoolStats,
    pub handles: BTreeMap<ResourceClass, Vec<u32>>,
    pub timers: Vec<(TimerId, u64, TimerMode, SlotId, u64)>,
    pub probes: Vec<ProbeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableSnapshot {
    pub def: TableDef,
    pub miss: SlotId,
    pub next: Option<TableId>,
    pub position: Position,
    pub entries: Vec<FlowEntry>,
}

impl DeviceSnapshot {
    /// Canonical byte form for exact comparison.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("snapshot serializes")
    }
}

#[derive(Debug, Clone)]
pub struct Device {
    pub(crate) cfg: DeviceConfig,
    pub(crate) limits: Limits,
    pub(crate) pool: ResourcePool,
    pub(crate) tables: BTreeMap<TableId, Table>,
    pub(crate) entry_table: Option<TableId>,
    pub(crate) redirects: BTreeMap<(TableId, TableId), TableId>,
    pub(crate) entry_loc: BTreeMap<EntryId, TableId>,
    pub(crate) entry_ids: IdAlloc,
    pub(crate) slots: BTreeMap<SlotId, Slot>,
    pub(crate) slot_ids: IdAlloc,
    pub(crate) blocks: BTreeMap<BlockId, StoredBlock>,
    pub(crate) block_ids: IdAlloc,
    pub(crate) ports: BTreeMap<PortId, Port>,
    pub(crate) probes: ProbeRegistry,
    pub(crate) fault_at_step: Option<usize>,
    /// Bumped by every control-plane mutation; plans record it.
    pub(crate) epoch: u64,
    pub stats: DeviceStats,
    now: u64,
}

impl Device {
    pub fn new(cfg: DeviceConfig) -> Self {
        let limits = Limits { mtu: cfg.mtu, ..Limits::default() };
        let mut d = Device {
            pool: ResourcePool::new(cfg.pool),
            limits,
            tables: BTreeMap::new(),
            entry_table: None,
            redirects: BTreeMap::new(),
            entry_loc: BTreeMap::new(),
            entry_ids: IdAlloc::default(),
            slots: BTreeMap::new(),
            slot_ids: IdAlloc::default(),
            blocks: BTreeMap::new(),
            block_ids: IdAlloc::default(),
            ports: cfg
                .ports
                .iter()
                .map(|p| (p.id, Port { cfg: *p, hooks: [None; 4], queue: VecDeque::new() }))
                .collect(),
            probes: ProbeRegistry::default(),
            fault_at_step: None,
            epoch: 0,
            stats: DeviceStats::default(),
            now: 0,
            cfg,
        };
        let miss = ActionBlock::new(vec![
            Instruction::GenPkt { dest: GenDest::Controller, tag: TAG_PACKET_IN, fields: vec![], mirror: true },
            Instruction::Drop,
        ]);
        let (slot, _) = d.load_action(miss).expect("default miss action is valid");
        debug_assert_eq!(slot, DEFAULT_MISS_SLOT);
        d
    }

    pub fn id(&self) -> DeviceId {
        self.cfg.id
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.cfg
    }

    pub fn caps(&self) -> &DeviceCaps {
        &self.cfg.caps
    }

    pub fn set_caps(&mut self, caps: DeviceCaps) {
        self.cfg.caps = caps;
    }

    pub fn limits(&self) -> &Limits {
        &self.limits
    }

    pub fn set_exec_mode(&mut self, mode: vm::ExecMode) {
        self.limits.mode = mode;
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn pool(&self) -> &ResourcePool {
        &self.pool
    }

    pub fn ports(&self) -> Vec<PortConfig> {
        self.ports.values().map(|p| p.cfg).collect()
    }

    pub fn table_ids(&self) -> Vec<TableId> {
        self.tables.keys().copied().collect()
    }

    pub fn entry_table(&self) -> Option<TableId> {
        self.entry_table
    }

    /// Fails commit step `n` of the next probe install.
    pub fn inject_fault(&mut self, step: Option<usize>) {
        self.fault_at_step = step;
    }

    // ---- tables ----

    pub fn create_table(&mut self, def: TableDef, pos: Position) -> Result<TableId, DeviceError> {
        self.epoch += 1;
        let id = def.id;
        if self.tables.contains_key(&id) {
            return Err(DeviceError::DuplicateTableId(id));
        }
        let width = def.key_width();
        if width > 128 {
            return Err(DeviceError::KeyTooWide(width));
        }
        let miss = def.miss.unwrap_or(DEFAULT_MISS_SLOT);
        if !self.slots.contains_key(&miss) {
            return Err(DeviceError::NoSuchSlot(miss));
        }
        let next = match pos {
            Position::End => {
                match self.tail() {
                    Some(t) => self.tables.get_mut(&t).expect("tail exists").next = Some(id),
                    None => self.entry_table = Some(id),
                }
                None
            }
            Position::Edge { from, to } => {
                let f = self.tables.get(&from).ok_or(DeviceError::InvalidPosition)?;
                if !self.tables.contains_key(&to) || self.redirects.contains_key(&(from, to)) {
                    return Err(DeviceError::InvalidPosition);
                }
                let fallthrough = f.next == Some(to);
                if !fallthrough && !self.table_gotos(from).contains(&to) {
                    return Err(DeviceError::InvalidPosition);
                }
                if fallthrough {
                    self.tables.get_mut(&from).expect("checked").next = Some(id);
                }
                self.redirects.insert((from, to), id);
                Some(to)
            }
        };
        self.slot_ref(miss, 1);
        self.tables.insert(
            id,
            Table { def, width: width as u8, entries: Vec::new(), miss, next, position: pos },
        );
        Ok(id)
    }

    fn tail(&self) -> Option<TableId> {
        let mut t = self.entry_table?;
        for _ in 0..=self.tables.len() {
            match self.tables[&t].next {
                Some(n) => t = n,
                None => return Some(t),
            }
        }
        Some(t)
    }

    /// GOTO targets named by the actions reachable from `table`.
    fn table_gotos(&self, table: TableId) -> BTreeSet<TableId> {
        let Some(t) = self.tables.get(&table) else { return BTreeSet::new() };
        let slots = t.entries.iter().map(|e| e.action).chain([t.miss]);
        let mut out = BTreeSet::new();
        for s in slots {
            if let Some(b) = self.slots.get(&s).and_then(|s| self.blocks.get(&s.block)) {
                for i in &b.block.instructions {
                    if let Instruction::GotoTable { table } = i {
                        out.insert(*table);
                    }
                }
            }
        }
        out
    }

    /// Removes a table and every entry in it, restoring the graph it was
    /// spliced into.
    pub fn delete_table(&mut self, id: TableId) -> Result<(), DeviceError> {
        self.epoch += 1;
        if !self.tables.contains_key(&id) {
            return Err(DeviceError::NoSuchTable(id));
        }
        if self.tables.values().any(|o| matches!(o.position, Position::Edge { to, .. } if to == id)) {
            return Err(DeviceError::InvalidPosition);
        }
        if let Some(p) = self.probe_on_table(id) {
            return Err(DeviceError::InUseByProbe(p));
        }
        let t = self.tables.remove(&id).expect("checked");
        for e in &t.entries {
            self.slot_ref(e.action, -1);
            self.entry_loc.remove(&e.id);
            self.entry_ids.release(e.id.0);
        }
        self.slot_ref(t.miss, -1);
        match t.position {
            Position::Edge { from, to } => {
                self.redirects.remove(&(from, to));
                if let Some(f) = self.tables.get_mut(&from) {
                    if f.next == Some(id) {
                        f.next = t.next;
                    }
                }
            }
            Position::End => {}
        }
        for o in self.tables.values_mut() {
            if o.next == Some(id) {
                o.next = t.next;
            }
        }
        if self.entry_table == Some(id) {
            self.entry_table = t.next;
        }
        Ok(())
    }

    pub fn set_table_miss(&mut self, table: TableId, slot: SlotId) -> Result<SlotId, DeviceError> {
        if let Some(p) = self.probes.probe_at(Loc::Miss(table)) {
            return Err(DeviceError::InUseByProbe(p));
        }
        self.set_table_miss_raw(table, slot)
    }

    pub(crate) fn set_table_miss_raw(&mut self, table: TableId, slot: SlotId) -> Result<SlotId, DeviceError> {
        self.epoch += 1;
        if !self.slots.contains_key(&slot) {
            return Err(DeviceError::NoSuchSlot(slot));
        }
        let t = self.tables.get_mut(&table).ok_or(DeviceError::NoSuchTable(table))?;
        let prev = std::mem::replace(&mut t.miss, slot);
        self.slot_ref(slot, 1);
        self.slot_ref(prev, -1);
        Ok(prev)
    }

    pub fn table_miss(&self, table: TableId) -> Result<SlotId, DeviceError> {
        Ok(self.table(table)?.miss)
    }

    pub(crate) fn table(&self, table: TableId) -> Result<&Table, DeviceError> {
        self.tables.get(&table).ok_or(DeviceError::NoSuchTable(table))
    }

    pub fn table_def(&self, table: TableId) -> Result<&TableDef, DeviceError> {
        Ok(&self.table(table)?.def)
    }

    pub fn entries(&self, table: TableId) -> Result<&[FlowEntry], DeviceError> {
        Ok(&self.table(table)?.entries)
    }

    pub fn entry(&self, id: EntryId) -> Result<&FlowEntry, DeviceError> {
        let t = self.entry_loc.get(&id).ok_or(DeviceError::NoSuchEntry(id))?;
        self.tables[t]
            .entries
            .iter()
            .find(|e| e.id == id)
            .ok_or(DeviceError::NoSuchEntry(id))
    }

    pub fn entry_table_of(&self, id: EntryId) -> Option<TableId> {
        self.entry_loc.get(&id).copied()
    }

    pub fn lookup(&self, table: TableId, key: u128, width: u8) -> Result<Option<&FlowEntry>, DeviceError> {
        let t = self.table(table)?;
        if t.width != width {
            return Err(DeviceError::KeyWidthMismatch);
        }
        Ok(t.lookup(key))
    }

    pub fn insert_entry(&mut self, table: TableId, spec: EntrySpec) -> Result<EntryId, DeviceError> {
        let id = EntryId(self.entry_ids.peek(1)[0]);
        self.insert_entry_at(table, id, spec)
    }

    pub(crate) fn insert_entry_at(
        &mut self,
        table: TableId,
        id: EntryId,
        spec: EntrySpec,
    ) -> Result<EntryId, DeviceError> {
        self.epoch += 1;
        let t = self.tables.get(&table).ok_or(DeviceError::NoSuchTable(table))?;
        if !self.slots.contains_key(&spec.action) {
            return Err(DeviceError::DanglingActionPtr(spec.action));
        }
        if spec.params.len() > MAX_PARAM_BYTES {
            return Err(DeviceError::ParamsTooLong);
        }
        if spec.key.mask & !width_mask(t.width) != 0 {
            return Err(DeviceError::KeyWidthMismatch);
        }
        if t.entries.iter().any(|e| e.key == spec.key && e.priority == spec.priority) {
            return Err(DeviceError::DuplicateEntry);
        }
        if t.entries.len() >= t.def.max_entries as usize {
            return Err(DeviceError::TableFull(table));
        }
        if !self.entry_ids.is_free(id.0) {
            return Err(DeviceError::IdInUse(id.to_string()));
        }
        self.entry_ids.take(id.0);
        self.slot_ref(spec.action, 1);
        let entry = FlowEntry { id, priority: spec.priority, key: spec.key, action: spec.action, params: spec.params };
        let t = self.tables.get_mut(&table).expect("checked");
        let at = t
            .entries
            .partition_point(|e| (std::cmp::Reverse(e.priority), e.id) < (std::cmp::Reverse(entry.priority), entry.id));
        t.entries.insert(at, entry);
        self.entry_loc.insert(id, table);
        Ok(id)
    }

    pub fn delete_entry(&mut self, id: EntryId) -> Result<FlowEntry, DeviceError> {
        if let Some(p) = self.probes.probe_on_entry(id) {
            return Err(DeviceError::InUseByProbe(p));
        }
        self.delete_entry_raw(id)
    }

    pub(crate) fn delete_entry_raw(&mut self, id: EntryId) -> Result<FlowEntry, DeviceError> {
        self.epoch += 1;
        let table = self.entry_loc.remove(&id).ok_or(DeviceError::NoSuchEntry(id))?;
        let t = self.tables.get_mut(&table).expect("entry index is consistent");
        let at = t.entries.iter().position(|e| e.id == id).expect("entry index is consistent");
        let e = t.entries.remove(at);
        self.slot_ref(e.action, -1);
        self.entry_ids.release(id.0);
        Ok(e)
    }

    /// Repoints an entry and/or replaces its parameters. Returns the previous
    /// action slot.
    pub fn modify_entry(
        &mut self,
        id: EntryId,
        action: Option<SlotId>,
        params: Option<Vec<u8>>,
    ) -> Result<SlotId, DeviceError> {
        if action.is_some() {
            if let Some(p) = self.probes.probe_on_entry(id) {
                return Err(DeviceError::InUseByProbe(p));
            }
        }
        self.modify_entry_raw(id, action, params)
    }

    pub(crate) fn modify_entry_raw(
        &mut self,
        id: EntryId,
        action: Option<SlotId>,
        params: Option<Vec<u8>>,
    ) -> Result<SlotId, DeviceError> {
        self.epoch += 1;
        let table = *self.entry_loc.get(&id).ok_or(DeviceError::NoSuchEntry(id))?;
        if let Some(s) = action {
            if !self.slots.contains_key(&s) {
                return Err(DeviceError::DanglingActionPtr(s));
            }
        }
        if params.as_ref().is_some_and(|p| p.len() > MAX_PARAM_BYTES) {
            return Err(DeviceError::ParamsTooLong);
        }
        let e = self.tables.get_mut(&table).expect("consistent").entries.iter_mut().find(|e| e.id == id).expect("consistent");
        let prev = e.action;
        if let Some(p) = params {
            e.params = p;
        }
        if let Some(s) = action {
            e.action = s;
            self.slot_ref(s, 1);
            self.slot_ref(prev, -1);
        }
        Ok(prev)
    }

    // ---- action store ----

    fn slot_ref(&mut self, slot: SlotId, delta: i32) {
        if let Some(s) = self.slots.get_mut(&slot) {
            s.refs = s.refs.checked_add_signed(delta).expect("slot refcount underflow");
        }
    }

    pub fn slot_refs(&self, slot: SlotId) -> Result<u32, DeviceError> {
        Ok(self.slots.get(&slot).ok_or(DeviceError::NoSuchSlot(slot))?.refs)
    }

    pub fn slot_block(&self, slot: SlotId) -> Result<BlockId, DeviceError> {
        Ok(self.slots.get(&slot).ok_or(DeviceError::NoSuchSlot(slot))?.block)
    }

    pub fn block(&self, id: BlockId) -> Result<&ActionBlock, DeviceError> {
        Ok(&self.blocks.get(&id).ok_or(DeviceError::BlockNotLoaded(id))?.block)
    }

    pub fn block_cost(&self, id: BlockId) -> Result<CostProfile, DeviceError> {
        Ok(self.blocks.get(&id).ok_or(DeviceError::BlockNotLoaded(id))?.cost)
    }

    pub fn slot_ids(&self) -> Vec<SlotId> {
        self.slots.keys().copied().collect()
    }

    pub fn load_block(&mut self, block: ActionBlock) -> Result<BlockId, DeviceError> {
        let id = BlockId(self.block_ids.peek(1)[0]);
        self.load_block_at(id, block)
    }

    pub(crate) fn load_block_at(&mut self, id: BlockId, block: ActionBlock) -> Result<BlockId, DeviceError> {
        self.epoch += 1;
        let cost = validate_with(&block, &self.limits)?;
        if !self.block_ids.take(id.0) {
            return Err(DeviceError::IdInUse(id.to_string()));
        }
        self.blocks.insert(id, StoredBlock { block, cost, slots: 0 });
        Ok(id)
    }

    pub fn delete_block(&mut self, id: BlockId) -> Result<ActionBlock, DeviceError> {
        self.epoch += 1;
        let b = self.blocks.get(&id).ok_or(DeviceError::BlockNotLoaded(id))?;
        if b.slots > 0 {
            return Err(DeviceError::BlockInUse(id));
        }
        self.block_ids.release(id.0);
        Ok(self.blocks.remove(&id).expect("checked").block)
    }

    pub fn create_slot(&mut self, block: BlockId) -> Result<SlotId, DeviceError> {
        let id = SlotId(self.slot_ids.peek(1)[0]);
        self.create_slot_at(id, block)
    }

    pub(crate) fn create_slot_at(&mut self, id: SlotId, block: BlockId) -> Result<SlotId, DeviceError> {
        self.epoch += 1;
        let b = self.blocks.get_mut(&block).ok_or(DeviceError::BlockNotLoaded(block))?;
        if !self.slot_ids.take(id.0) {
            return Err(DeviceError::IdInUse(id.to_string()));
        }
        b.slots += 1;
        self.slots.insert(id, Slot { block, refs: 0 });
        Ok(id)
    }

    pub fn delete_slot(&mut self, id: SlotId) -> Result<BlockId, DeviceError> {
        self.epoch += 1;
        let s = self.slots.get(&id).ok_or(DeviceError::NoSuchSlot(id))?;
        if s.refs > 0 || id == DEFAULT_MISS_SLOT {
            return Err(DeviceError::SlotInUse(id));
        }
        let block = s.block;
        self.slots.remove(&id);
        self.slot_ids.release(id.0);
        if let Some(b) = self.blocks.get_mut(&block) {
            b.slots -= 1;
        }
        Ok(block)
    }

    /// Validates and loads `block` into a fresh slot.
    pub fn load_action(&mut self, block: ActionBlock) -> Result<(SlotId, BlockId), DeviceError> {
        let b = self.load_block(block)?;
        match self.create_slot(b) {
            Ok(s) => Ok((s, b)),
            Err(e) => {
                let _ = self.delete_block(b);
                Err(e)
            }
        }
    }

    /// Deletes a slot, and its block if no other slot points there.
    pub fn delete_action(&mut self, slot: SlotId) -> Result<(), DeviceError> {
        let b = self.delete_slot(slot)?;
        if self.blocks.get(&b).is_some_and(|b| b.slots == 0) {
            self.delete_block(b)?;
        }
        Ok(())
    }

    /// Atomically repoints `slot`; returns the block it pointed at.
    pub fn switch_action_pointer(&mut self, slot: SlotId, block: BlockId) -> Result<BlockId, DeviceError> {
        if let Some(p) = self.probes.probe_on_slot(slot) {
            return Err(DeviceError::InUseByProbe(p));
        }
        self.switch_action_pointer_raw(slot, block)
    }

    pub(crate) fn switch_action_pointer_raw(&mut self, slot: SlotId, block: BlockId) -> Result<BlockId, DeviceError> {
        self.epoch += 1;
        if !self.blocks.contains_key(&block) {
            return Err(DeviceError::BlockNotLoaded(block));
        }
        let s = self.slots.get_mut(&slot).ok_or(DeviceError::NoSuchSlot(slot))?;
        let prev = std::mem::replace(&mut s.block, block);
        self.blocks.get_mut(&prev).expect("slot points at a loaded block").slots -= 1;
        self.blocks.get_mut(&block).expect("checked").slots += 1;
        Ok(prev)
    }

    // ---- ports ----

    fn port(&self, p: PortId) -> Result<&Port, DeviceError> {
        self.ports.get(&p).ok_or(DeviceError::NoSuchPort(p))
    }

    pub fn hook(&self, port: PortId, kind: HookKind) -> Result<Option<SlotId>, DeviceError> {
        Ok(self.port(port)?.hooks[kind.idx()])
    }

    pub(crate) fn set_hook(&mut self, port: PortId, kind: HookKind, slot: Option<SlotId>) -> Result<Option<SlotId>, DeviceError> {
        self.epoch += 1;
        if let Some(s) = slot {
            if !self.slots.contains_key(&s) {
                return Err(DeviceError::NoSuchSlot(s));
            }
        }
        let p = self.ports.get_mut(&port).ok_or(DeviceError::NoSuchPort(port))?;
        let prev = std::mem::replace(&mut p.hooks[kind.idx()], slot);
        if let Some(s) = slot {
            self.slot_ref(s, 1);
        }
        if let Some(s) = prev {
            self.slot_ref(s, -1);
        }
        Ok(prev)
    }

    pub fn queue_depth(&self, port: PortId) -> Result<u32, DeviceError> {
        Ok(self.port(port)?.queue.len() as u32)
    }

    pub fn port_config(&self, port: PortId) -> Result<PortConfig, DeviceError> {
        Ok(self.port(port)?.cfg)
    }

    // ---- pool ----

    pub fn alloc(&mut self, req: AllocRequest) -> Result<ResourceHandle, DeviceError> {
        self.epoch += 1;
        Ok(self.pool.alloc(req)?)
    }

    /// Returns a handle to the pool unless a loaded block still declares it.
    pub fn release(&mut self, h: ResourceHandle) -> Result<(), DeviceError> {
        self.epoch += 1;
        if !self.pool.is_live(h) {
            return Err(DeviceError::Pool(PoolError::NoSuchHandle(h)));
        }
        if self.blocks.values().any(|b| b.block.declared.contains(&h)) {
            return Err(DeviceError::HandleInUse(h));
        }
        Ok(self.pool.release(h)?)
    }

    /// Pull-mode counter read: `(value, unit, read_ts)`.
    pub fn read_counter(&self, c: CounterId) -> Result<(u64, CounterUnit, u64), DeviceError> {
        let cell = self.pool.counter(c)?;
        Ok((cell.value, cell.unit, self.now))
    }

    pub fn read_register(&self, r: RegisterId) -> Result<u64, DeviceError> {
        Ok(self.pool.register(r)?)
    }

    pub fn stb_dump(&self, t: StbId) -> Result<Vec<StbRecord>, DeviceError> {
        Ok(self.pool.stb_dump(t)?)
    }

    pub fn pool_stats(&self) -> PoolStats {
        self.pool.stats()
    }

    pub fn set_timer(&mut self, interval: u64, mode: TimerMode, slot: SlotId) -> Result<TimerId, DeviceError> {
        let id = TimerId(
            *self
                .pool
                .peek_free(ResourceClass::Timer, 1)
                .first()
                .ok_or(DeviceError::Pool(PoolError::PoolExhausted(ResourceClass::Timer)))?,
        );
        self.set_timer_at(id, interval, mode, slot)
    }

    pub(crate) fn set_timer_at(
        &mut self,
        id: TimerId,
        interval: u64,
        mode: TimerMode,
        slot: SlotId,
    ) -> Result<TimerId, DeviceError> {
        self.epoch += 1;
        let s = self.slots.get(&slot).ok_or(DeviceError::NoSuchSlot(slot))?;
        if self.blocks[&s.block].block.needs_packet() {
            return Err(DeviceError::ActionNeedsPacket);
        }
        if self.pool.peek_free(ResourceClass::Timer, 1).first() != Some(&id.0) {
            return Err(DeviceError::StaleRequest);
        }
        let t = self.pool.set_timer(interval, mode, slot, self.now)?;
        debug_assert_eq!(t, id);
        self.slot_ref(slot, 1);
        Ok(t)
    }

    pub fn cancel_timer(&mut self, t: TimerId) -> Result<(), DeviceError> {
        self.epoch += 1;
        let e = self.pool.cancel_timer(t)?;
        self.slot_ref(e.linked_action, -1);
        Ok(())
    }

    // ---- data path ----

    fn report(&mut self, tag: u32, fields: Vec<u128>, packet: Option<Vec<u8>>, eff: &mut Effects) {
        self.stats.reports += 1;
        eff.reports.push(Report { device: self.cfg.id, tag, ts: self.now, fields, packet });
    }

    fn absorb(&mut self, out: ExecOutcome, eff: &mut Effects) {
        eff.mem_accesses += out.mem_accesses as u64;
        for r in out.reports {
            self.report(r.tag, r.fields, r.packet, eff);
        }
        eff.generated.extend(out.generated);
    }

    fn fault(&mut self, slot: SlotId, e: &ExecError, eff: &mut Effects) {
        self.stats.exec_faults += 1;
        let at = match e {
            ExecError::Pool(i, _)
            | ExecError::Undeclared(i)
            | ExecError::NoPacket(i)
            | ExecError::FieldOutOfBounds(i)
            | ExecError::PacketWrite(i)
            | ExecError::BadBranch(i)
            | ExecError::BadOperand(i) => *i,
        };
        self.report(TAG_DIAGNOSTIC, vec![diag::EXEC_FAULT, slot.0 as u128, at as u128], None, eff);
    }

    /// Runs the block behind `slot`. Reports and generated packets are
    /// collected into `eff` on success; a fault emits a diagnostic.
    fn run_slot(
        &mut self,
        slot: SlotId,
        pkt: Option<&mut Vec<u8>>,
        md: &mut [u8; META_BYTES],
        params: Params,
        eff: &mut Effects,
    ) -> Result<Disposition, ()> {
        let res = {
            let block = self
                .slots
                .get(&slot)
                .and_then(|s| self.blocks.get(&s.block))
                .map(|b| &b.block);
            match block {
                Some(block) => {
                    let params: &[u8] = match params {
                        Params::None => &[],
                        Params::Entry(t, i) => &self.tables[&t].entries[i].params,
                    };
                    let mut ctx = ExecContext { packet: pkt, meta: md, params, now: self.now, mode: self.limits.mode };
                    execute(block, &mut ctx, &mut self.pool)
                }
                None => Err(ExecError::BadOperand(0)),
            }
        };
        match res {
            Ok(out) => {
                let d = out.disposition();
                self.absorb(out, eff);
                Ok(d)
            }
            Err(e) => {
                self.fault(slot, &e, eff);
                Err(())
            }
        }
    }

    fn drop_pkt(&mut self, r: DropReason, packet: Vec<u8>, effects: Effects, stages: u32) -> ForwardingOutcome {
        *self.stats.dropped.entry(r).or_default() += 1;
        ForwardingOutcome { verdict: Verdict::Drop(r), packet, effects, stages }
    }

    /// Builds the lookup key. `None` if a packet key field lies past the end
    /// of the packet.
    fn build_key(t: &Table, pkt: &[u8], md: &[u8; META_BYTES], params: &[u8]) -> Option<u128> {
        let mut key = 0u128;
        for f in &t.def.key {
            let v = match f.space {
                Space::Packet => {
                    if f.end() > pkt.len() as u64 * 8 {
                        return None;
                    }
                    read_bits(pkt, f.offset, f.len)
                }
                Space::Metadata => read_bits(&md[..], f.offset, f.len),
                Space::Params => read_bits(params, f.offset, f.len),
            };
            key = if f.len >= 128 { v } else { (key << f.len) | v };
        }
        Some(key)
    }

    fn resolve_goto(&self, from: TableId, mut to: TableId) -> TableId {
        for _ in 0..=self.redirects.len() {
            match self.redirects.get(&(from, to)) {
                Some(n) => to = *n,
                None => break,
            }
        }
        to
    }

    /// Runs one packet through ingress, the table pipeline, and egress.
    /// Forwarded packets must then be passed to [`Device::enqueue`].
    pub fn process_packet(&mut self, in_port: PortId, mut pkt: Vec<u8>, now: u64) -> ForwardingOutcome {
        self.now = self.now.max(now);
        self.stats.rx += 1;
        let mut eff = Effects::default();
        if pkt.len() > self.limits.mtu {
            return self.drop_pkt(DropReason::Oversize, pkt, eff, 0);
        }
        let Some(port) = self.ports.get(&in_port) else {
            return self.drop_pkt(DropReason::NoSuchPort, pkt, eff, 0);
        };
        let ingress = port.hooks[HookKind::Ingress.idx()];
        let mut md = [0u8; META_BYTES];
        crate::field::write_bits(&mut md, meta::IN_PORT.offset, meta::IN_PORT.len, in_port as u128);

        if let Some(slot) = ingress {
            if let Ok(Disposition::Drop) = self.run_slot(slot, Some(&mut pkt), &mut md, Params::None, &mut eff) {
                return self.drop_pkt(DropReason::Action, pkt, eff, 0);
            }
        }
        if is_probe_packet(&pkt) {
            self.stats.unclaimed_probe_packets += 1;
            return self.drop_pkt(DropReason::UnclaimedProbe, pkt, eff, 0);
        }

        let Some(mut table) = self.entry_table else {
            return self.drop_pkt(DropReason::EndOfPipeline, pkt, eff, 0);
        };
        let mut stages = 0u32;
        loop {
            if stages >= self.cfg.max_stages {
                self.report(TAG_DIAGNOSTIC, vec![diag::STAGE_LIMIT, table as u128, 0], None, &mut eff);
                return self.drop_pkt(DropReason::StageLimit, pkt, eff, stages);
            }
            stages += 1;
            let Some(t) = self.tables.get(&table) else {
                return self.drop_pkt(DropReason::NoSuchTable, pkt, eff, stages);
            };
            let Some(key) = Self::build_key(t, &pkt, &md, &[]) else {
                return self.drop_pkt(DropReason::Malformed, pkt, eff, stages);
            };
            let (slot, params) = match t.entries.iter().position(|e| e.key.matches(key)) {
                Some(i) => (t.entries[i].action, Params::Entry(table, i)),
                None => (t.miss, Params::None),
            };
            let miss = t.miss;
            let next = t.next;
            let disp = match self.run_slot(slot, Some(&mut pkt), &mut md, params, &mut eff) {
                Ok(d) => d,
                Err(()) if slot != miss => {
                    match self.run_slot(miss, Some(&mut pkt), &mut md, Params::None, &mut eff) {
                        Ok(d) => d,
                        Err(()) => return self.drop_pkt(DropReason::Fault, pkt, eff, stages),
                    }
                }
                Err(()) => return self.drop_pkt(DropReason::Fault, pkt, eff, stages),
            };
            match disp {
                Disposition::Output(p) => return self.egress(p, pkt, md, eff, stages),
                Disposition::Drop => return self.drop_pkt(DropReason::Action, pkt, eff, stages),
                Disposition::Goto(t2) => table = self.resolve_goto(table, t2),
                Disposition::Continue => match next {
                    Some(n) => table = n,
                    None => return self.drop_pkt(DropReason::EndOfPipeline, pkt, eff, stages),
                },
            }
        }
    }

    fn egress(
        &mut self,
        port: PortId,
        mut pkt: Vec<u8>,
        mut md: [u8; META_BYTES],
        mut eff: Effects,
        stages: u32,
    ) -> ForwardingOutcome {
        let Some(p) = self.ports.get(&port) else {
            return self.drop_pkt(DropReason::NoSuchPort, pkt, eff, stages);
        };
        if let Some(slot) = p.hooks[HookKind::Egress.idx()] {
            if let Ok(Disposition::Drop) = self.run_slot(slot, Some(&mut pkt), &mut md, Params::None, &mut eff) {
                return self.drop_pkt(DropReason::Action, pkt, eff, stages);
            }
        }
        self.stats.forwarded += 1;
        ForwardingOutcome { verdict: Verdict::Forward(port), packet: pkt, effects: eff, stages }
    }

    fn queue_hook(&mut self, port: PortId, kind: HookKind, depth: usize, pkt: &mut Vec<u8>, eff: &mut Effects) {
        let Some(slot) = self.ports.get(&port).and_then(|p| p.hooks[kind.idx()]) else { return };
        let mut md = [0u8; META_BYTES];
        crate::field::write_bits(&mut md, meta::QUEUE_DEPTH.offset, meta::QUEUE_DEPTH.len, depth as u128);
        let ev = if kind == HookKind::Enqueue { 1 } else { 2 };
        crate::field::write_bits(&mut md, meta::QUEUE_EVENT.offset, meta::QUEUE_EVENT.len, ev);
        let _ = self.run_slot(slot, Some(pkt), &mut md, Params::None, eff);
    }

    /// Appends to the egress queue of `port`. Returns false (and counts a
    /// drop) when the queue is full.
    pub fn enqueue(&mut self, port: PortId, mut pkt: Vec<u8>, now: u64) -> (bool, Effects) {
        self.now = self.now.max(now);
        let mut eff = Effects::default();
        let Some(p) = self.ports.get(&port) else {
            *self.stats.dropped.entry(DropReason::NoSuchPort).or_default() += 1;
            return (false, eff);
        };
        let depth = p.queue.len();
        if depth >= p.cfg.queue_capacity as usize {
            *self.stats.dropped.entry(DropReason::QueueFull).or_default() += 1;
            return (false, eff);
        }
        self.queue_hook(port, HookKind::Enqueue, depth + 1, &mut pkt, &mut eff);
        self.ports.get_mut(&port).expect("checked").queue.push_back(pkt);
        (true, eff)
    }

    /// Takes the head of the egress queue of `port` for transmission.
    pub fn dequeue(&mut self, port: PortId, now: u64) -> Option<(Vec<u8>, Effects)> {
        self.now = self.now.max(now);
        let p = self.ports.get_mut(&port)?;
        let mut pkt = p.queue.pop_front()?;
        let depth = p.queue.len();
        let mut eff = Effects::default();
        self.queue_hook(port, HookKind::Dequeue, depth, &mut pkt, &mut eff);
        Some((pkt, eff))
    }

    /// Time of the next timer firing.
    pub fn next_timer(&self) -> Option<u64> {
        self.pool.next_due().map(|(t, _)| t)
    }

    /// Fires every timer due at or before `to`, in (time, timer id) order,
    /// with no packet present.
    pub fn advance_clock(&mut self, to: u64) -> Effects {
        let mut eff = Effects::default();
        while let Some((at, id)) = self.pool.next_due() {
            if at > to {
                break;
            }
            self.now = self.now.max(at);
            let slot = self.pool.timer(id).expect("due timer exists").linked_action;
            let mut md = [0u8; META_BYTES];
            let _ = self.run_slot(slot, None, &mut md, Params::None, &mut eff);
            if let Some(done) = self.pool.mark_fired(id) {
                self.epoch += 1;
                self.slot_ref(done.linked_action, -1);
            }
        }
        self.now = self.now.max(to);
        eff
    }

    // ---- snapshots ----

    pub fn snapshot(&self) -> DeviceSnapshot {
        DeviceSnapshot {
            entry_table: self.entry_table,
            tables: self
                .tables
                .values()
                .map(|t| TableSnapshot {
                    def: t.def.clone(),
                    miss: t.miss,
                    next: t.next,
                    position: t.position,
                    entries: t.entries.clone(),
                })
                .collect(),
            redirects: self.redirects.iter().map(|((a, b), c)| (*a, *b, *c)).collect(),
            slots: self.slots.iter().map(|(id, s)| (*id, s.block, s.refs)).collect(),
            blocks: self.blocks.iter().map(|(id, b)| (*id, b.block.clone())).collect(),
            hooks: self.ports.iter().map(|(id, p)| (*id, p.hooks)).collect(),
            pool: self.pool.stats(),
            handles: self.pool.allocated_handles(),
            timers: self
                .pool
                .timers()
                .map(|t| (t.timer_id, t.interval, t.mode, t.linked_action, t.armed_at))
                .collect(),
            probes: self.probes.ids(),
        }
    }
}

#[derive(Clone, Copy)]
enum Params {
    None,
    Entry(TableId, usize),
}
