use dnp_core::device::{EntrySpec, Position, Report, TableDef};
use dnp_core::ids::*;
use dnp_core::pool::{AllocRequest, ClassStats, CounterUnit, PoolStats, StbRecord, TimerMode};
use dnp_core::probe::ProbeSpec;
use serde::{Deserialize, Serialize};

use crate::wire::{Reader, Writer};
use crate::CodecError;

pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;

/// Error code for an unknown message type or a request the device does not
/// serve.
pub const ERR_UNSUPPORTED: u16 = 40;
/// Error code for a frame whose header parsed but whose body did not.
pub const ERR_BAD_FRAME: u16 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub msg_type: u8,
    pub xid: u32,
    pub body_len: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub xid: u32,
    pub msg: Message,
}

/// One row of a probe listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub probe: ProbeId,
    pub spec: ProbeSpec,
    pub handles: Vec<ResourceHandle>,
    pub subscribers: Vec<AppId>,
    pub locations: u32,
    /// Static per-packet memory accesses.
    pub cost: u32,
}

/// A control channel message. Body layouts are given per variant, fields in
/// order. Ids are u32 unless noted; table and port ids are u16.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// 0x00, empty.
    Hello,
    /// 0x01, empty.
    Ack,
    /// 0x02: code u16, detail str.
    Error { code: u16, detail: String },
    /// 0x03, empty.
    FeaturesReq,
    /// 0x04: device u32, ports vec<u16>, base_pps f64, budget f64, floor f64.
    FeaturesReply { device: DeviceId, ports: Vec<PortId>, base_pps: f64, budget: f64, floor: f64 },
    /// 0x10: block bytes (encoded action block). Loads the block and binds a
    /// fresh slot to it.
    LoadAction { block: Vec<u8> },
    /// 0x11: slot, block.
    LoadActionReply { slot: SlotId, block: BlockId },
    /// 0x12: slot.
    DeleteAction { slot: SlotId },
    /// 0x13: slot, block.
    SwitchPointer { slot: SlotId, block: BlockId },
    /// 0x14: block bytes. Loads without binding a slot.
    LoadBlock { block: Vec<u8> },
    /// 0x15: block.
    LoadBlockReply { block: BlockId },
    /// 0x16: block.
    DeleteBlock { block: BlockId },
    /// 0x20: table u16, key vec<field>, max_entries u32, miss opt<slot>,
    /// writable bool, position (tag u8: 0 end, 1 edge from u16 to u16).
    /// A field is space u8 (0 packet, 1 metadata, 2 params), offset u32,
    /// len u8.
    CreateTable { def: TableDef, pos: Position },
    /// 0x21: table u16.
    DeleteTable { table: TableId },
    /// 0x22: table u16, priority u32, value u128, mask u128, slot,
    /// params bytes.
    InsertEntry { table: TableId, spec: EntrySpec },
    /// 0x23: entry.
    InsertEntryReply { entry: EntryId },
    /// 0x24: entry.
    DeleteEntry { entry: EntryId },
    /// 0x25: entry, action opt<slot>, params opt<bytes>.
    ModifyEntry { entry: EntryId, action: Option<SlotId>, params: Option<Vec<u8>> },
    /// 0x26: table u16, miss slot.
    SetTableMiss { table: TableId, miss: SlotId },
    /// 0x30: class u8 then class payload (counter: unit u8; meter: cir, cbs,
    /// pir, pbs u64; state table: key_width u8, capacity u32).
    AllocResource { req: AllocRequest },
    /// 0x31: class u8, index u32.
    AllocReply { handle: ResourceHandle },
    /// 0x32: class u8, index u32.
    ReleaseResource { handle: ResourceHandle },
    /// 0x33, empty.
    PoolStatsReq,
    /// 0x34: vec of (class u8, capacity u32, allocated u32, free u32).
    PoolStatsReply { stats: PoolStats },
    /// 0x40: interval u64 ns, mode u8 (0 one-shot, 1 periodic), slot.
    SetTimer { interval: u64, mode: TimerMode, slot: SlotId },
    /// 0x41: timer.
    SetTimerReply { timer: TimerId },
    /// 0x42: timer.
    CancelTimer { timer: TimerId },
    /// 0x50: counter.
    ReadCounterReq { counter: CounterId },
    /// 0x51: value u64, unit u8 (0 packets, 1 bytes), ts u64.
    ReadCounterReply { value: u64, unit: CounterUnit, ts: u64 },
    /// 0x52: state table.
    StbDumpReq { table: StbId },
    /// 0x53: vec of (key u128, value u64, insert_ts u64).
    StbDumpReply { records: Vec<StbRecord> },
    /// 0x54, empty.
    SnapshotReq,
    /// 0x55: snapshot bytes.
    SnapshotReply { bytes: Vec<u8> },
    /// 0x56: register.
    ReadRegisterReq { register: RegisterId },
    /// 0x57: value u64.
    ReadRegisterReply { value: u64 },
    /// 0x60: spec as JSON str.
    ProbeInstall { spec: ProbeSpec },
    /// 0x61: probe, handles vec<handle>, overlaps vec<entry>.
    ProbeInstalled { probe: ProbeId, handles: Vec<ResourceHandle>, overlaps: Vec<EntryId> },
    /// 0x62: probe, force bool.
    ProbeRevoke { probe: ProbeId, force: bool },
    /// 0x63: probe, app.
    Subscribe { probe: ProbeId, app: AppId },
    /// 0x64: probe, app.
    Unsubscribe { probe: ProbeId, app: AppId },
    /// 0x65: remaining subscriber count u32.
    SubscriberCount { count: u32 },
    /// 0x66: spec as JSON str. Plans and runs admission without committing.
    ProbeCheck { spec: ProbeSpec },
    /// 0x67: accept bool, estimate f64, floor f64, cost u32, active u32.
    ProbeCheckReply { accept: bool, estimate: f64, floor: f64, cost: u32, active: u32 },
    /// 0x68, empty.
    ProbeListReq,
    /// 0x69: vec of JSON str.
    ProbeList { probes: Vec<ProbeSummary> },
    /// 0x70: device u32, tag u32 (probe id), ts u64, fields vec<u128>,
    /// packet opt<bytes>.
    Report(Report),
    /// 0x71: step opt<u32>. Arms commit fault injection on the device.
    InjectFault { step: Option<u32> },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        use Message::*;
        match self {
            Hello => 0x00,
            Ack => 0x01,
            Error { .. } => 0x02,
            FeaturesReq => 0x03,
            FeaturesReply { .. } => 0x04,
            LoadAction { .. } => 0x10,
            LoadActionReply { .. } => 0x11,
            DeleteAction { .. } => 0x12,
            SwitchPointer { .. } => 0x13,
            LoadBlock { .. } => 0x14,
            LoadBlockReply { .. } => 0x15,
            DeleteBlock { .. } => 0x16,
            CreateTable { .. } => 0x20,
            DeleteTable { .. } => 0x21,
            InsertEntry { .. } => 0x22,
            InsertEntryReply { .. } => 0x23,
            DeleteEntry { .. } => 0x24,
            ModifyEntry { .. } => 0x25,
            SetTableMiss { .. } => 0x26,
            AllocResource { .. } => 0x30,
            AllocReply { .. } => 0x31,
            ReleaseResource { .. } => 0x32,
            PoolStatsReq => 0x33,
            PoolStatsReply { .. } => 0x34,
            SetTimer { .. } => 0x40,
            SetTimerReply { .. } => 0x41,
            CancelTimer { .. } => 0x42,
            ReadCounterReq { .. } => 0x50,
            ReadCounterReply { .. } => 0x51,
            StbDumpReq { .. } => 0x52,
            StbDumpReply { .. } => 0x53,
            SnapshotReq => 0x54,
            SnapshotReply { .. } => 0x55,
            ReadRegisterReq { .. } => 0x56,
            ReadRegisterReply { .. } => 0x57,
            ProbeInstall { .. } => 0x60,
            ProbeInstalled { .. } => 0x61,
            ProbeRevoke { .. } => 0x62,
            Subscribe { .. } => 0x63,
            Unsubscribe { .. } => 0x64,
            SubscriberCount { .. } => 0x65,
            ProbeCheck { .. } => 0x66,
            ProbeCheckReply { .. } => 0x67,
            ProbeListReq => 0x68,
            ProbeList { .. } => 0x69,
            Report(_) => 0x70,
            InjectFault { .. } => 0x71,
        }
    }

    pub fn name(&self) -> &'static str {
        use Message::*;
        match self {
            Hello => "HELLO",
            Ack => "ACK",
            Error { .. } => "ERROR",
            FeaturesReq => "FEATURES_REQ",
            FeaturesReply { .. } => "FEATURES_REPLY",
            LoadAction { .. } => "LOAD_ACTION",
            LoadActionReply { .. } => "LOAD_ACTION_REPLY",
            DeleteAction { .. } => "DELETE_ACTION",
            SwitchPointer { .. } => "SWITCH_POINTER",
            LoadBlock { .. } => "LOAD_BLOCK",
            LoadBlockReply { .. } => "LOAD_BLOCK_REPLY",
            DeleteBlock { .. } => "DELETE_BLOCK",
            CreateTable { .. } => "CREATE_TABLE",
            DeleteTable { .. } => "DELETE_TABLE",
            InsertEntry { .. } => "INSERT_ENTRY",
            InsertEntryReply { .. } => "INSERT_ENTRY_REPLY",
            DeleteEntry { .. } => "DELETE_ENTRY",
            ModifyEntry { .. } => "MODIFY_ENTRY",
            SetTableMiss { .. } => "SET_TABLE_MISS",
            AllocResource { .. } => "ALLOC_RESOURCE",
            AllocReply { .. } => "ALLOC_REPLY",
            ReleaseResource { .. } => "RELEASE_RESOURCE",
            PoolStatsReq => "POOL_STATS_REQ",
            PoolStatsReply { .. } => "POOL_STATS_REPLY",
            SetTimer { .. } => "SET_TIMER",
            SetTimerReply { .. } => "SET_TIMER_REPLY",
            CancelTimer { .. } => "CANCEL_TIMER",
            ReadCounterReq { .. } => "READ_COUNTER_REQ",
            ReadCounterReply { .. } => "READ_COUNTER_REPLY",
            StbDumpReq { .. } => "STB_DUMP_REQ",
            StbDumpReply { .. } => "STB_DUMP_REPLY",
            SnapshotReq => "SNAPSHOT_REQ",
            SnapshotReply { .. } => "SNAPSHOT_REPLY",
            ReadRegisterReq { .. } => "READ_REGISTER_REQ",
            ReadRegisterReply { .. } => "READ_REGISTER_REPLY",
            ProbeInstall { .. } => "PROBE_INSTALL",
            ProbeInstalled { .. } => "PROBE_INSTALLED",
            ProbeRevoke { .. } => "PROBE_REVOKE",
            Subscribe { .. } => "SUBSCRIBE",
            Unsubscribe { .. } => "UNSUBSCRIBE",
            SubscriberCount { .. } => "SUBSCRIBER_COUNT",
            ProbeCheck { .. } => "PROBE_CHECK",
            ProbeCheckReply { .. } => "PROBE_CHECK_REPLY",
            ProbeListReq => "PROBE_LIST_REQ",
            ProbeList { .. } => "PROBE_LIST",
            Report(_) => "REPORT",
            InjectFault { .. } => "INJECT_FAULT",
        }
    }

    fn encode_body(&self, w: &mut Writer) {
        use Message::*;
        match self {
            Hello | Ack | FeaturesReq | PoolStatsReq | SnapshotReq | ProbeListReq => {}
            Error { code, detail } => {
                w.u16(*code);
                w.str(detail);
            }
            FeaturesReply { device, ports, base_pps, budget, floor } => {
                w.u32(*device);
                w.vec(ports, |w, p| w.u16(*p));
                w.f64(*base_pps);
                w.f64(*budget);
                w.f64(*floor);
            }
            LoadAction { block } | LoadBlock { block } => w.bytes(block),
            LoadActionReply { slot, block } | SwitchPointer { slot, block } => {
                w.u32(slot.0);
                w.u32(block.0);
            }
            DeleteAction { slot } => w.u32(slot.0),
            LoadBlockReply { block } | DeleteBlock { block } => w.u32(block.0),
            CreateTable { def, pos } => {
                w.table_def(def);
                w.position(pos);
            }
            DeleteTable { table } => w.u16(*table),
            InsertEntry { table, spec } => {
                w.u16(*table);
                w.entry(spec);
            }
            InsertEntryReply { entry } | DeleteEntry { entry } => w.u32(entry.0),
            ModifyEntry { entry, action, params } => {
                w.u32(entry.0);
                w.opt(action, |w, s| w.u32(s.0));
                w.opt(params, |w, p| w.bytes(p));
            }
            SetTableMiss { table, miss } => {
                w.u16(*table);
                w.u32(miss.0);
            }
            AllocResource { req } => w.alloc(req),
            AllocReply { handle } | ReleaseResource { handle } => w.handle(handle),
            PoolStatsReply { stats } => {
                w.u32(stats.len() as u32);
                for (class, s) in stats {
                    w.u8(class.code());
                    w.u32(s.capacity);
                    w.u32(s.allocated);
                    w.u32(s.free);
                }
            }
            SetTimer { interval, mode, slot } => {
                w.u64(*interval);
                w.mode(*mode);
                w.u32(slot.0);
            }
            SetTimerReply { timer } | CancelTimer { timer } => w.u32(timer.0),
            ReadCounterReq { counter } => w.u32(counter.0),
            ReadCounterReply { value, unit, ts } => {
                w.u64(*value);
                w.unit(*unit);
                w.u64(*ts);
            }
            StbDumpReq { table } => w.u32(table.0),
            StbDumpReply { records } => w.vec(records, |w, r| w.stb_record(r)),
            SnapshotReply { bytes } => w.bytes(bytes),
            ReadRegisterReq { register } => w.u32(register.0),
            ReadRegisterReply { value } => w.u64(*value),
            ProbeInstall { spec } | ProbeCheck { spec } => w.str(&json(spec)),
            ProbeInstalled { probe, handles, overlaps } => {
                w.u32(probe.0);
                w.vec(handles, |w, h| w.handle(h));
                w.vec(overlaps, |w, e| w.u32(e.0));
            }
            ProbeRevoke { probe, force } => {
                w.u32(probe.0);
                w.bool(*force);
            }
            Subscribe { probe, app } | Unsubscribe { probe, app } => {
                w.u32(probe.0);
                w.u32(app.0);
            }
            SubscriberCount { count } => w.u32(*count),
            ProbeCheckReply { accept, estimate, floor, cost, active } => {
                w.bool(*accept);
                w.f64(*estimate);
                w.f64(*floor);
                w.u32(*cost);
                w.u32(*active);
            }
            ProbeList { probes } => w.vec(probes, |w, p| w.str(&json(p))),
            Report(r) => w.report(r),
            InjectFault { step } => w.opt(step, |w, s| w.u32(*s)),
        }
    }

    fn decode_body(msg_type: u8, xid: u32, r: &mut Reader) -> Result<Message, CodecError> {
        use Message::*;
        Ok(match msg_type {
            0x00 => Hello,
            0x01 => Ack,
            0x02 => Error { code: r.u16()?, detail: r.str()? },
            0x03 => FeaturesReq,
            0x04 => FeaturesReply {
                device: r.u32()?,
                ports: r.vec(2, |r| r.u16())?,
                base_pps: r.f64()?,
                budget: r.f64()?,
                floor: r.f64()?,
            },
            0x10 => LoadAction { block: r.bytes()? },
            0x11 => LoadActionReply { slot: SlotId(r.u32()?), block: BlockId(r.u32()?) },
            0x12 => DeleteAction { slot: SlotId(r.u32()?) },
            0x13 => SwitchPointer { slot: SlotId(r.u32()?), block: BlockId(r.u32()?) },
            0x14 => LoadBlock { block: r.bytes()? },
            0x15 => LoadBlockReply { block: BlockId(r.u32()?) },
            0x16 => DeleteBlock { block: BlockId(r.u32()?) },
            0x20 => CreateTable { def: r.table_def()?, pos: r.position()? },
            0x21 => DeleteTable { table: r.u16()? },
            0x22 => InsertEntry { table: r.u16()?, spec: r.entry()? },
            0x23 => InsertEntryReply { entry: EntryId(r.u32()?) },
            0x24 => DeleteEntry { entry: EntryId(r.u32()?) },
            0x25 => ModifyEntry {
                entry: EntryId(r.u32()?),
                action: r.opt(|r| Ok(SlotId(r.u32()?)))?,
                params: r.opt(|r| r.bytes())?,
            },
            0x26 => SetTableMiss { table: r.u16()?, miss: SlotId(r.u32()?) },
            0x30 => AllocResource { req: r.alloc()? },
            0x31 => AllocReply { handle: r.handle()? },
            0x32 => ReleaseResource { handle: r.handle()? },
            0x33 => PoolStatsReq,
            0x34 => {
                let rows = r.vec(13, |r| {
                    let class = r.class()?;
                    Ok((class, ClassStats { capacity: r.u32()?, allocated: r.u32()?, free: r.u32()? }))
                })?;
                let n = rows.len();
                let stats: PoolStats = rows.into_iter().collect();
                if stats.len() != n {
                    return Err(CodecError::BadBody("duplicate resource class".into()));
                }
                PoolStatsReply { stats }
            }
            0x40 => SetTimer { interval: r.u64()?, mode: r.mode()?, slot: SlotId(r.u32()?) },
            0x41 => SetTimerReply { timer: TimerId(r.u32()?) },
            0x42 => CancelTimer { timer: TimerId(r.u32()?) },
            0x50 => ReadCounterReq { counter: CounterId(r.u32()?) },
            0x51 => ReadCounterReply { value: r.u64()?, unit: r.unit()?, ts: r.u64()? },
            0x52 => StbDumpReq { table: StbId(r.u32()?) },
            0x53 => StbDumpReply { records: r.vec(32, |r| r.stb_record())? },
            0x54 => SnapshotReq,
            0x55 => SnapshotReply { bytes: r.bytes()? },
            0x56 => ReadRegisterReq { register: RegisterId(r.u32()?) },
            0x57 => ReadRegisterReply { value: r.u64()? },
            0x60 => ProbeInstall { spec: from_json(&r.str()?)? },
            0x61 => ProbeInstalled {
                probe: ProbeId(r.u32()?),
                handles: r.vec(5, |r| r.handle())?,
                overlaps: r.vec(4, |r| Ok(EntryId(r.u32()?)))?,
            },
            0x62 => ProbeRevoke { probe: ProbeId(r.u32()?), force: r.bool()? },
            0x63 => Subscribe { probe: ProbeId(r.u32()?), app: AppId(r.u32()?) },
            0x64 => Unsubscribe { probe: ProbeId(r.u32()?), app: AppId(r.u32()?) },
            0x65 => SubscriberCount { count: r.u32()? },
            0x66 => ProbeCheck { spec: from_json(&r.str()?)? },
            0x67 => ProbeCheckReply {
                accept: r.bool()?,
                estimate: r.f64()?,
                floor: r.f64()?,
                cost: r.u32()?,
                active: r.u32()?,
            },
            0x68 => ProbeListReq,
            0x69 => ProbeList { probes: r.vec(4, |r| from_json(&r.str()?))? },
            0x70 => Report(r.report()?),
            0x71 => InjectFault { step: r.opt(|r| r.u32())? },
            _ => return Err(CodecError::UnknownType { msg_type, xid }),
        })
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("probe types serialize")
}

fn from_json<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T, CodecError> {
    serde_json::from_str(s).map_err(|e| CodecError::BadBody(e.to_string()))
}

/// Encodes one frame.
pub fn encode(xid: u32, msg: &Message) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(HEADER_LEN + 16));
    w.u8(VERSION);
    w.u8(msg.msg_type());
    w.u32(xid);
    w.u32(0);
    msg.encode_body(&mut w);
    let len = (w.0.len() - HEADER_LEN) as u32;
    w.0[6..10].copy_from_slice(&len.to_le_bytes());
    w.0
}

/// Parses the header without checking the body.
pub fn peek_header(buf: &[u8]) -> Result<Header, CodecError> {
    if buf.len() < HEADER_LEN {
        return Err(CodecError::Truncated { need: HEADER_LEN, have: buf.len() });
    }
    let mut r = Reader::new(&buf[..HEADER_LEN]);
    let h = Header { version: r.u8()?, msg_type: r.u8()?, xid: r.u32()?, body_len: r.u32()? };
    if h.version != VERSION {
        return Err(CodecError::BadVersion(h.version));
    }
    Ok(h)
}

/// Decodes exactly one frame; `buf` must hold nothing else.
pub fn decode(buf: &[u8]) -> Result<Frame, CodecError> {
    let h = peek_header(buf)?;
    let total = HEADER_LEN + h.body_len as usize;
    if buf.len() < total {
        return Err(CodecError::Truncated { need: total, have: buf.len() });
    }
    if buf.len() > total {
        return Err(CodecError::BadLength);
    }
    let mut r = Reader::new(&buf[HEADER_LEN..]);
    let msg = Message::decode_body(h.msg_type, h.xid, &mut r)?;
    if r.remaining() != 0 {
        return Err(CodecError::BadLength);
    }
    Ok(Frame { xid: h.xid, msg })
}
