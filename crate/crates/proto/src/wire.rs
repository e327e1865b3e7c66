//! Little-endian primitive readers and writers shared by the message codec.

use dnp_core::device::{EntrySpec, MatchKey, Position, Report, TableDef};
use dnp_core::field::{FieldRef, Space};
use dnp_core::ids::*;
use dnp_core::pool::{AllocRequest, CounterUnit, MeterConfig, StbRecord, TimerMode};

use crate::CodecError;

#[derive(Default)]
pub(crate) struct Writer(pub Vec<u8>);

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    pub fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    pub fn opt<T>(&mut self, v: &Option<T>, f: impl FnOnce(&mut Self, &T)) {
        match v {
            None => self.u8(0),
            Some(x) => {
                self.u8(1);
                f(self, x);
            }
        }
    }
    pub fn vec<T>(&mut self, v: &[T], mut f: impl FnMut(&mut Self, &T)) {
        self.u32(v.len() as u32);
        for x in v {
            f(self, x);
        }
    }

    pub fn field(&mut self, f: &FieldRef) {
        self.u8(match f.space {
            Space::Packet => 0,
            Space::Metadata => 1,
            Space::Params => 2,
        });
        self.u32(f.offset);
        self.u8(f.len);
    }
    pub fn key(&mut self, k: &MatchKey) {
        self.u128(k.value);
        self.u128(k.mask);
    }
    pub fn handle(&mut self, h: &ResourceHandle) {
        self.u8(h.class().code());
        self.u32(h.index());
    }
    pub fn unit(&mut self, u: CounterUnit) {
        self.u8(match u {
            CounterUnit::Packets => 0,
            CounterUnit::Bytes => 1,
        });
    }
    pub fn mode(&mut self, m: TimerMode) {
        self.u8(match m {
            TimerMode::OneShot => 0,
            TimerMode::Periodic => 1,
        });
    }
    pub fn table_def(&mut self, d: &TableDef) {
        self.u16(d.id);
        self.vec(&d.key, |w, f| w.field(f));
        self.u32(d.max_entries);
        self.opt(&d.miss, |w, s| w.u32(s.0));
        self.bool(d.writable_by_actions);
    }
    pub fn position(&mut self, p: &Position) {
        match p {
            Position::End => self.u8(0),
            Position::Edge { from, to } => {
                self.u8(1);
                self.u16(*from);
                self.u16(*to);
            }
        }
    }
    pub fn entry(&mut self, e: &EntrySpec) {
        self.u32(e.priority);
        self.key(&e.key);
        self.u32(e.action.0);
        self.bytes(&e.params);
    }
    pub fn alloc(&mut self, r: &AllocRequest) {
        self.u8(r.class().code());
        match r {
            AllocRequest::Counter { unit } => self.unit(*unit),
            AllocRequest::Meter { config } => {
                self.u64(config.cir);
                self.u64(config.cbs);
                self.u64(config.pir);
                self.u64(config.pbs);
            }
            AllocRequest::Register | AllocRequest::Sampler => {}
            AllocRequest::StateTable { key_width, capacity } => {
                self.u8(*key_width);
                self.u32(*capacity);
            }
        }
    }
    pub fn report(&mut self, r: &Report) {
        self.u32(r.device);
        self.u32(r.tag);
        self.u64(r.ts);
        self.vec(&r.fields, |w, f| w.u128(*f));
        self.opt(&r.packet, |w, p| w.bytes(p));
    }
    pub fn stb_record(&mut self, r: &StbRecord) {
        self.u128(r.key);
        self.u64(r.value);
        self.u64(r.insert_ts);
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn bad(msg: &str) -> CodecError {
    CodecError::BadBody(msg.to_string())
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::BadLength);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    pub fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    pub fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    pub fn u128(&mut self) -> Result<u128, CodecError> {
        Ok(u128::from_le_bytes(self.arr()?))
    }
    pub fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_bits(self.u64()?))
    }
    pub fn bool(&mut self) -> Result<bool, CodecError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(bad("boolean out of range")),
        }
    }
    pub fn bytes(&mut self) -> Result<Vec<u8>, CodecError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    pub fn str(&mut self) -> Result<String, CodecError> {
        String::from_utf8(self.bytes()?).map_err(|_| bad("invalid utf-8"))
    }
    pub fn opt<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T, CodecError>) -> Result<Option<T>, CodecError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(f(self)?)),
            _ => Err(bad("option tag out of range")),
        }
    }
    /// `min_item` bounds the count by the bytes left, so a corrupted count
    /// cannot trigger a huge allocation.
    pub fn vec<T>(
        &mut self,
        min_item: usize,
        mut f: impl FnMut(&mut Self) -> Result<T, CodecError>,
    ) -> Result<Vec<T>, CodecError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item.max(1)) > self.remaining() {
            return Err(CodecError::BadLength);
        }
        (0..n).map(|_| f(self)).collect()
    }

    pub fn field(&mut self) -> Result<FieldRef, CodecError> {
        let space = match self.u8()? {
            0 => Space::Packet,
            1 => Space::Metadata,
            2 => Space::Params,
            _ => return Err(bad("unknown field space")),
        };
        let offset = self.u32()?;
        let len = self.u8()?;
        if len == 0 || len > 128 {
            return Err(bad("field length out of range"));
        }
        Ok(FieldRef::new(space, offset, len))
    }
    pub fn key(&mut self) -> Result<MatchKey, CodecError> {
        let value = self.u128()?;
        let mask = self.u128()?;
        if value & !mask != 0 {
            return Err(bad("match value has bits outside the mask"));
        }
        Ok(MatchKey { value, mask })
    }
    pub fn class(&mut self) -> Result<ResourceClass, CodecError> {
        ResourceClass::from_code(self.u8()?).ok_or_else(|| bad("unknown resource class"))
    }
    pub fn handle(&mut self) -> Result<ResourceHandle, CodecError> {
        let class = self.class()?;
        let idx = self.u32()?;
        ResourceHandle::from_parts(class, idx).ok_or_else(|| bad("timers are not handles"))
    }
    pub fn unit(&mut self) -> Result<CounterUnit, CodecError> {
        match self.u8()? {
            0 => Ok(CounterUnit::Packets),
            1 => Ok(CounterUnit::Bytes),
            _ => Err(bad("unknown counter unit")),
        }
    }
    pub fn mode(&mut self) -> Result<TimerMode, CodecError> {
        match self.u8()? {
            0 => Ok(TimerMode::OneShot),
            1 => Ok(TimerMode::Periodic),
            _ => Err(bad("unknown timer mode")),
        }
    }
    pub fn table_def(&mut self) -> Result<TableDef, CodecError> {
        Ok(TableDef {
            id: self.u16()?,
            key: self.vec(6, |r| r.field())?,
            max_entries: self.u32()?,
            miss: self.opt(|r| Ok(SlotId(r.u32()?)))?,
            writable_by_actions: self.bool()?,
        })
    }
    pub fn position(&mut self) -> Result<Position, CodecError> {
        match self.u8()? {
            0 => Ok(Position::End),
            1 => Ok(Position::Edge { from: self.u16()?, to: self.u16()? }),
            _ => Err(bad("unknown position tag")),
        }
    }
    pub fn entry(&mut self) -> Result<EntrySpec, CodecError> {
        Ok(EntrySpec { priority: self.u32()?, key: self.key()?, action: SlotId(self.u32()?), params: self.bytes()? })
    }
    pub fn alloc(&mut self) -> Result<AllocRequest, CodecError> {
        Ok(match self.class()? {
            ResourceClass::Counter => AllocRequest::Counter { unit: self.unit()? },
            ResourceClass::Meter => AllocRequest::Meter {
                config: MeterConfig { cir: self.u64()?, cbs: self.u64()?, pir: self.u64()?, pbs: self.u64()? },
            },
            ResourceClass::Register => AllocRequest::Register,
            ResourceClass::StateTable => AllocRequest::StateTable { key_width: self.u8()?, capacity: self.u32()? },
            ResourceClass::Sampler => AllocRequest::Sampler,
            ResourceClass::Timer => return Err(bad("timers are set, not allocated")),
        })
    }
    pub fn report(&mut self) -> Result<Report, CodecError> {
        Ok(Report {
            device: self.u32()?,
            tag: self.u32()?,
            ts: self.u64()?,
            fields: self.vec(16, |r| r.u128())?,
            packet: self.opt(|r| r.bytes())?,
        })
    }
    pub fn stb_record(&mut self) -> Result<StbRecord, CodecError> {
        Ok(StbRecord { key: self.u128()?, value: self.u64()?, insert_ts: self.u64()? })
    }
}
