//! The dynamically shared resource pool: counters, meters, registers, state
//! tables, samplers and timers.
//!
//! Every class is a fixed-capacity slab. Allocation always hands out the
//! lowest free index, so allocate/release sequences are reversible down to
//! the handle numbers.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub counters: u32,
    pub meters: u32,
    pub registers: u32,
    pub state_tables: u32,
    /// Upper bound on a single state table's capacity.
    pub stb_entries: u32,
    pub timers: u32,
    pub samplers: u32,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            counters: 16384,
            meters: 1024,
            registers: 4096,
            state_tables: 64,
            stb_entries: 65536,
            timers: 256,
            samplers: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum PoolError {
    #[error("pool exhausted for {0:?}")]
    PoolExhausted(ResourceClass),
    #[error("handle {0} is referenced by a loaded block")]
    HandleInUse(ResourceHandle),
    #[error("no such handle {0}")]
    NoSuchHandle(ResourceHandle),
    #[error("no such timer {0}")]
    NoSuchTimer(TimerId),
    #[error("state table {0} capacity {1} exceeds the pool limit")]
    BadCapacity(StbId, u32),
    #[error("key width {got} does not match state table width {want}")]
    KeyWidthMismatch { want: u8, got: u8 },
    #[error("timer interval must be positive")]
    ZeroInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterUnit {
    #[default]
    Packets,
    Bytes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CounterCell {
    pub value: u64,
    pub unit: CounterUnit,
}

/// Two-rate three-color marker parameters. Rates in bytes per second, bursts
/// in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterConfig {
    pub cir: u64,
    pub cbs: u64,
    pub pir: u64,
    pub pbs: u64,
}

const NS: u128 = 1_000_000_000;

/// Token state in byte-nanoseconds so refills stay exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterCell {
    pub config: MeterConfig,
    committed: u128,
    peak: u128,
    last_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Color {
    Green = 0,
    Yellow = 1,
    Red = 2,
}

impl MeterCell {
    fn new(config: MeterConfig) -> Self {
        MeterCell {
            config,
            committed: config.cbs as u128 * NS,
            peak: config.pbs as u128 * NS,
            last_ns: 0,
        }
    }

    /// Color-blind marking of a `bytes`-long packet at time `now`.
    pub fn mark(&mut self, bytes: u64, now: u64) -> Color {
        let dt = now.saturating_sub(self.last_ns) as u128;
        self.last_ns = self.last_ns.max(now);
        let c = self.config;
        self.committed = (self.committed + c.cir as u128 * dt).min(c.cbs as u128 * NS);
        self.peak = (self.peak + c.pir as u128 * dt).min(c.pbs as u128 * NS);
        let need = bytes as u128 * NS;
        if self.peak < need {
            Color::Red
        } else if self.committed < need {
            self.peak -= need;
            Color::Yellow
        } else {
            self.peak -= need;
            self.committed -= need;
            Color::Green
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StbEntry {
    pub value: u64,
    pub insert_ts: u64,
    seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateTable {
    pub key_width: u8,
    pub capacity: u32,
    entries: HashMap<u128, StbEntry>,
    next_seq: u64,
    /// Inserts dropped because the table was full.
    pub dropped_inserts: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StbRecord {
    pub key: u128,
    pub value: u64,
    pub insert_ts: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StbInsertResult {
    Inserted,
    Overwritten,
    Full,
}

impl StateTable {
    fn new(key_width: u8, capacity: u32) -> Self {
        StateTable {
            key_width,
            capacity,
            entries: HashMap::new(),
            next_seq: 0,
            dropped_inserts: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: u128) -> Option<&StbEntry> {
        self.entries.get(&key)
    }

    fn insert(&mut self, key: u128, value: u64, now: u64) -> (StbInsertResult, Option<StbEntry>) {
        let seq = self.next_seq;
        if let Some(prev) = self.entries.get_mut(&key) {
            let old = *prev;
            *prev = StbEntry { value, insert_ts: now, seq };
            self.next_seq += 1;
            return (StbInsertResult::Overwritten, Some(old));
        }
        if self.entries.len() >= self.capacity as usize {
            self.dropped_inserts += 1;
            return (StbInsertResult::Full, None);
        }
        self.entries.insert(key, StbEntry { value, insert_ts: now, seq });
        self.next_seq += 1;
        (StbInsertResult::Inserted, None)
    }

    /// Entries ordered by insertion time.
    pub fn dump(&self) -> Vec<StbRecord> {
        let mut v: Vec<_> = self.entries.iter().collect();
        v.sort_by_key(|(_, e)| (e.insert_ts, e.seq));
        v.into_iter()
            .map(|(k, e)| StbRecord { key: *k, value: e.value, insert_ts: e.insert_ts })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerMode {
    OneShot,
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimerEntry {
    pub timer_id: TimerId,
    pub interval: u64,
    pub mode: TimerMode,
    pub linked_action: SlotId,
    pub armed_at: u64,
    pub fired: u64,
}

impl TimerEntry {
    /// Fire times are computed from the arming time, never accumulated.
    pub fn next_fire(&self) -> u64 {
        self.armed_at + (self.fired + 1) * self.interval
    }
}

#[derive(Debug, Clone)]
struct Slab<T> {
    cells: Vec<Option<T>>,
    free: BTreeSet<u32>,
}

impl<T> Slab<T> {
    fn new(capacity: u32) -> Self {
        Slab {
            cells: (0..capacity).map(|_| None).collect(),
            free: (0..capacity).collect(),
        }
    }

    fn alloc(&mut self, v: T) -> Option<u32> {
        let idx = self.free.pop_first()?;
        self.cells[idx as usize] = Some(v);
        Some(idx)
    }

    fn release(&mut self, idx: u32) -> Option<T> {
        let v = self.cells.get_mut(idx as usize)?.take()?;
        self.free.insert(idx);
        Some(v)
    }

    fn get(&self, idx: u32) -> Option<&T> {
        self.cells.get(idx as usize)?.as_ref()
    }

    fn get_mut(&mut self, idx: u32) -> Option<&mut T> {
        self.cells.get_mut(idx as usize)?.as_mut()
    }

    fn capacity(&self) -> u32 {
        self.cells.len() as u32
    }

    fn allocated(&self) -> u32 {
        self.capacity() - self.free.len() as u32
    }

    fn peek_free(&self, n: usize) -> Vec<u32> {
        self.free.iter().take(n).copied().collect()
    }

    fn live(&self) -> impl Iterator<Item = (u32, &T)> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.as_ref().map(|c| (i as u32, c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub capacity: u32,
    pub allocated: u32,
    pub free: u32,
}

/// Per-class capacity accounting.
pub type PoolStats = BTreeMap<ResourceClass, ClassStats>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum AllocRequest {
    Counter { unit: CounterUnit },
    Meter { config: MeterConfig },
    Register,
    StateTable { key_width: u8, capacity: u32 },
    Sampler,
}

impl AllocRequest {
    pub fn class(&self) -> ResourceClass {
        match self {
            AllocRequest::Counter { .. } => ResourceClass::Counter,
            AllocRequest::Meter { .. } => ResourceClass::Meter,
            AllocRequest::Register => ResourceClass::Register,
            AllocRequest::StateTable { .. } => ResourceClass::StateTable,
            AllocRequest::Sampler => ResourceClass::Sampler,
        }
    }
}

/// Inverse of one pool write, recorded during block execution.
#[derive(Debug, Clone)]
pub(crate) enum Undo {
    Counter(CounterId, u64),
    Register(RegisterId, u64),
    Meter(MeterId, MeterCell),
    Sampler(SamplerId, u64),
    StbInsert { stb: StbId, key: u128, prev: Option<StbEntry>, next_seq: u64, dropped: u64 },
    StbDelete { stb: StbId, key: u128, prev: StbEntry },
}

#[derive(Debug, Clone)]
pub struct ResourcePool {
    config: PoolConfig,
    counters: Slab<CounterCell>,
    meters: Slab<MeterCell>,
    registers: Slab<u64>,
    tables: Slab<StateTable>,
    samplers: Slab<u64>,
    timers: Slab<TimerEntry>,
}

impl Default for ResourcePool {
    fn default() -> Self {
        Self::new(PoolConfig::default())
    }
}

impl ResourcePool {
    pub fn new(config: PoolConfig) -> Self {
        ResourcePool {
            config,
            counters: Slab::new(config.counters),
            meters: Slab::new(config.meters),
            registers: Slab::new(config.registers),
            tables: Slab::new(config.state_tables),
            samplers: Slab::new(config.samplers),
            timers: Slab::new(config.timers),
        }
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn alloc(&mut self, req: AllocRequest) -> Result<ResourceHandle, PoolError> {
        let class = req.class();
        let exhausted = PoolError::PoolExhausted(class);
        Ok(match req {
            AllocRequest::Counter { unit } => ResourceHandle::Counter(CounterId(
                self.counters.alloc(CounterCell { value: 0, unit }).ok_or(exhausted)?,
            )),
            AllocRequest::Meter { config } => ResourceHandle::Meter(MeterId(
                self.meters.alloc(MeterCell::new(config)).ok_or(exhausted)?,
            )),
            AllocRequest::Register => {
                ResourceHandle::Register(RegisterId(self.registers.alloc(0).ok_or(exhausted)?))
            }
            AllocRequest::StateTable { key_width, capacity } => {
                if capacity > self.config.stb_entries || key_width == 0 || key_width > 128 {
                    let next = self.tables.peek_free(1).first().copied().unwrap_or(0);
                    return Err(PoolError::BadCapacity(StbId(next), capacity));
                }
                ResourceHandle::StateTable(StbId(
                    self.tables
                        .alloc(StateTable::new(key_width, capacity))
                        .ok_or(exhausted)?,
                ))
            }
            AllocRequest::Sampler => {
                ResourceHandle::Sampler(SamplerId(self.samplers.alloc(0).ok_or(exhausted)?))
            }
        })
    }

    /// Returns the cell to the pool. Contents are discarded, so the next
    /// tenant always starts from zero.
    pub fn release(&mut self, h: ResourceHandle) -> Result<(), PoolError> {
        let gone = match h {
            ResourceHandle::Counter(c) => self.counters.release(c.0).is_some(),
            ResourceHandle::Meter(m) => self.meters.release(m.0).is_some(),
            ResourceHandle::Register(r) => self.registers.release(r.0).is_some(),
            ResourceHandle::StateTable(t) => self.tables.release(t.0).is_some(),
            ResourceHandle::Sampler(s) => self.samplers.release(s.0).is_some(),
        };
        if gone {
            Ok(())
        } else {
            Err(PoolError::NoSuchHandle(h))
        }
    }

    pub fn is_live(&self, h: ResourceHandle) -> bool {
        match h {
            ResourceHandle::Counter(c) => self.counters.get(c.0).is_some(),
            ResourceHandle::Meter(m) => self.meters.get(m.0).is_some(),
            ResourceHandle::Register(r) => self.registers.get(r.0).is_some(),
            ResourceHandle::StateTable(t) => self.tables.get(t.0).is_some(),
            ResourceHandle::Sampler(s) => self.samplers.get(s.0).is_some(),
        }
    }

    /// The indices the next `n` allocations of `class` would return.
    pub fn peek_free(&self, class: ResourceClass, n: usize) -> Vec<u32> {
        match class {
            ResourceClass::Counter => self.counters.peek_free(n),
            ResourceClass::Meter => self.meters.peek_free(n),
            ResourceClass::Register => self.registers.peek_free(n),
            ResourceClass::StateTable => self.tables.peek_free(n),
            ResourceClass::Timer => self.timers.peek_free(n),
            ResourceClass::Sampler => self.samplers.peek_free(n),
        }
    }

    pub fn stats(&self) -> PoolStats {
        let mut out = BTreeMap::new();
        let mut put = |class, cap: u32, alloc: u32| {
            out.insert(class, ClassStats { capacity: cap, allocated: alloc, free: cap - alloc });
        };
        put(ResourceClass::Counter, self.counters.capacity(), self.counters.allocated());
        put(ResourceClass::Meter, self.meters.capacity(), self.meters.allocated());
        put(ResourceClass::Register, self.registers.capacity(), self.registers.allocated());
        put(ResourceClass::StateTable, self.tables.capacity(), self.tables.allocated());
        put(ResourceClass::Timer, self.timers.capacity(), self.timers.allocated());
        put(ResourceClass::Sampler, self.samplers.capacity(), self.samplers.allocated());
        out
    }

    /// Allocated indices per class, for snapshots.
    pub fn allocated_handles(&self) -> BTreeMap<ResourceClass, Vec<u32>> {
        let mut out = BTreeMap::new();
        out.insert(ResourceClass::Counter, self.counters.live().map(|(i, _)| i).collect());
        out.insert(ResourceClass::Meter, self.meters.live().map(|(i, _)| i).collect());
        out.insert(ResourceClass::Register, self.registers.live().map(|(i, _)| i).collect());
        out.insert(ResourceClass::StateTable, self.tables.live().map(|(i, _)| i).collect());
        out.insert(ResourceClass::Timer, self.timers.live().map(|(i, _)| i).collect());
        out.insert(ResourceClass::Sampler, self.samplers.live().map(|(i, _)| i).collect());
        out
    }

    pub fn counter(&self, c: CounterId) -> Result<&CounterCell, PoolError> {
        self.counters
            .get(c.0)
            .ok_or(PoolError::NoSuchHandle(ResourceHandle::Counter(c)))
    }

    pub fn meter(&self, m: MeterId) -> Result<&MeterCell, PoolError> {
        self.meters
            .get(m.0)
            .ok_or(PoolError::NoSuchHandle(ResourceHandle::Meter(m)))
    }

    pub fn register(&self, r: RegisterId) -> Result<u64, PoolError> {
        self.registers
            .get(r.0)
            .copied()
            .ok_or(PoolError::NoSuchHandle(ResourceHandle::Register(r)))
    }

    pub fn write_register(&mut self, r: RegisterId, v: u64) -> Result<u64, PoolError> {
        let cell = self
            .registers
            .get_mut(r.0)
            .ok_or(PoolError::NoSuchHandle(ResourceHandle::Register(r)))?;
        Ok(std::mem::replace(cell, v))
    }

    pub fn state_table(&self, t: StbId) -> Result<&StateTable, PoolError> {
        self.tables
            .get(t.0)
            .ok_or(PoolError::NoSuchHandle(ResourceHandle::StateTable(t)))
    }

    fn state_table_mut(&mut self, t: StbId) -> Result<&mut StateTable, PoolError> {
        self.tables
            .get_mut(t.0)
            .ok_or(PoolError::NoSuchHandle(ResourceHandle::StateTable(t)))
    }

    fn check_width(tbl: &StateTable, width: u8) -> Result<(), PoolError> {
        if tbl.key_width != width {
            return Err(PoolError::KeyWidthMismatch { want: tbl.key_width, got: width });
        }
        Ok(())
    }

    pub fn stb_insert(
        &mut self,
        t: StbId,
        key: u128,
        width: u8,
        value: u64,
        now: u64,
    ) -> Result<StbInsertResult, PoolError> {
        let tbl = self.state_table_mut(t)?;
        Self::check_width(tbl, width)?;
        Ok(tbl.insert(key, value, now).0)
    }

    /// Removes `key`. Deleting an absent key is a successful no-op.
    pub fn stb_delete(&mut self, t: StbId, key: u128, width: u8) -> Result<bool, PoolError> {
        let tbl = self.state_table_mut(t)?;
        Self::check_width(tbl, width)?;
        Ok(tbl.entries.remove(&key).is_some())
    }

    pub fn stb_lookup(&self, t: StbId, key: u128, width: u8) -> Result<Option<StbEntry>, PoolError> {
        let tbl = self.state_table(t)?;
        Self::check_width(tbl, width)?;
        Ok(tbl.get(key).copied())
    }

    pub fn stb_dump(&self, t: StbId) -> Result<Vec<StbRecord>, PoolError> {
        Ok(self.state_table(t)?.dump())
    }

    // --- execution-time accessors with undo records ---

    pub(crate) fn counter_add(&mut self, c: CounterId, delta: i64) -> Result<(u64, Undo), PoolError> {
        let cell = self
            .counters
            .get_mut(c.0)
            .ok_or(PoolError::NoSuchHandle(ResourceHandle::Counter(c)))?;
        let old = cell.value;
        cell.value = old.saturating_add_signed(delta);
        Ok((cell.value, Undo::Counter(c, old)))
    }

    pub(crate) fn counter_set(&mut self, c: CounterId, v: u64) -> Result<Undo, PoolError> {
        let cell = self
            .counters
            .get_mut(c.0)
            .ok_or(PoolError::NoSuchHandle(ResourceHandle::Counter(c)))?;
        let old = std::mem::replace(&mut cell.value, v);
        Ok(Undo::Counter(c, old))
    }

    pub(crate) fn register_write_undo(&mut self, r: RegisterId, v: u64) -> Result<Undo, PoolError> {
        Ok(Undo::Register(r, self.write_register(r, v)?))
    }

    pub(crate) fn meter_mark(&mut self, m: MeterId, bytes: u64, now: u64) -> Result<(Color, Undo), PoolError> {
        let cell = self
            .meters
            .get_mut(m.0)
            .ok_or(PoolError::NoSuchHandle(ResourceHandle::Meter(m)))?;
        let old = *cell;
        Ok((cell.mark(bytes, now), Undo::Meter(m, old)))
    }

    pub(crate) fn sample(&mut self, s: SamplerId, n: u32) -> Result<(bool, Undo), PoolError> {
        let cell = self
            .samplers
            .get_mut(s.0)
            .ok_or(PoolError::NoSuchHandle(ResourceHandle::Sampler(s)))?;
        let old = *cell;
        *cell += 1;
        Ok((old % n as u64 == 0, Undo::Sampler(s, old)))
    }

    pub(crate) fn stb_insert_undo(
        &mut self,
        t: StbId,
        key: u128,
        width: u8,
        value: u64,
        now: u64,
    ) -> Result<(StbInsertResult, Undo), PoolError> {
        let tbl = self.state_table_mut(t)?;
        Self::check_width(tbl, width)?;
        let next_seq = tbl.next_seq;
        let dropped = tbl.dropped_inserts;
        let (res, prev) = tbl.insert(key, value, now);
        Ok((res, Undo::StbInsert { stb: t, key, prev, next_seq, dropped }))
    }

    pub(crate) fn stb_delete_undo(
        &mut self,
        t: StbId,
        key: u128,
        width: u8,
    ) -> Result<Option<Undo>, PoolError> {
        let tbl = self.state_table_mut(t)?;
        Self::check_width(tbl, width)?;
        Ok(tbl
            .entries
            .remove(&key)
            .map(|prev| Undo::StbDelete { stb: t, key, prev }))
    }

    pub(crate) fn undo(&mut self, u: Undo) {
        match u {
            Undo::Counter(c, v) => {
                if let Some(cell) = self.counters.get_mut(c.0) {
                    cell.value = v;
                }
            }
            Undo::Register(r, v) => {
                let _ = self.write_register(r, v);
            }
            Undo::Meter(m, cell) => {
                if let Some(c) = self.meters.get_mut(m.0) {
                    *c = cell;
                }
            }
            Undo::Sampler(s, v) => {
                if let Some(c) = self.samplers.get_mut(s.0) {
                    *c = v;
                }
            }
            Undo::StbInsert { stb, key, prev, next_seq, dropped } => {
                if let Some(t) = self.tables.get_mut(stb.0) {
                    match prev {
                        Some(p) => {
                            t.entries.insert(key, p);
                        }
                        None => {
                            if t.next_seq != next_seq {
                                t.entries.remove(&key);
                            }
                        }
                    }
                    t.next_seq = next_seq;
                    t.dropped_inserts = dropped;
                }
            }
            Undo::StbDelete { stb, key, prev } => {
                if let Some(t) = self.tables.get_mut(stb.0) {
                    t.entries.insert(key, prev);
                }
            }
        }
    }

    // --- timers ---

    pub fn set_timer(
        &mut self,
        interval: u64,
        mode: TimerMode,
        linked_action: SlotId,
        now: u64,
    ) -> Result<TimerId, PoolError> {
        if interval == 0 {
            return Err(PoolError::ZeroInterval);
        }
        let idx = self.timers.free.first().copied().ok_or(PoolError::PoolExhausted(ResourceClass::Timer))?;
        let entry = TimerEntry {
            timer_id: TimerId(idx),
            interval,
            mode,
            linked_action,
            armed_at: now,
            fired: 0,
        };
        self.timers.alloc(entry);
        Ok(TimerId(idx))
    }

    pub fn cancel_timer(&mut self, t: TimerId) -> Result<TimerEntry, PoolError> {
        self.timers.release(t.0).ok_or(PoolError::NoSuchTimer(t))
    }

    pub fn timer(&self, t: TimerId) -> Option<&TimerEntry> {
        self.timers.get(t.0)
    }

    pub fn timers(&self) -> impl Iterator<Item = &TimerEntry> {
        self.timers.live().map(|(_, t)| t)
    }

    /// Earliest pending firing as `(time, timer)`; ties go to the lower id.
    pub fn next_due(&self) -> Option<(u64, TimerId)> {
        self.timers
            .live()
            .map(|(_, t)| (t.next_fire(), t.timer_id))
            .min()
    }

    /// Records that `t` fired. One-shot timers are released and returned.
    pub(crate) fn mark_fired(&mut self, t: TimerId) -> Option<TimerEntry> {
        let entry = self.timers.get_mut(t.0)?;
        entry.fired += 1;
        if entry.mode == TimerMode::OneShot {
            return self.timers.release(t.0);
        }
        None
    }
}
