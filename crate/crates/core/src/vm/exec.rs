//! Block interpreter.
//!
//! Execution is all-or-nothing: every pool or field write is logged, and a
//! fault replays the log backwards before the error is returned.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AluOp, ActionBlock, ExecMode, GenDest, Instruction, Operand, META_BYTES};
use crate::field::{read_bits, write_bits, FieldRef, Space};
use crate::ids::*;
use crate::pool::{PoolError, ResourcePool, StbInsertResult, Undo};

/// Ethertype that marks device-generated probe packets.
pub const PROBE_ETHERTYPE: u16 = 0x88B5;
/// Minimum size of a generated probe packet.
pub const PROBE_PKT_MIN: usize = 64;
/// Bit offset of the first field in a probe packet.
pub const PROBE_FIELDS_BIT: u32 = 112;

/// Builds a marked probe packet carrying `fields` as 64-bit words.
pub fn probe_packet(fields: &[u128]) -> Vec<u8> {
    let mut pkt = vec![0u8; (14 + 8 * fields.len()).max(PROBE_PKT_MIN)];
    pkt[12..14].copy_from_slice(&PROBE_ETHERTYPE.to_be_bytes());
    for (i, f) in fields.iter().enumerate() {
        let at = 14 + 8 * i;
        pkt[at..at + 8].copy_from_slice(&(*f as u64).to_be_bytes());
    }
    pkt
}

pub fn is_probe_packet(pkt: &[u8]) -> bool {
    pkt.len() >= 14 && pkt[12..14] == PROBE_ETHERTYPE.to_be_bytes()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Disposition {
    Output(PortId),
    Goto(TableId),
    Drop,
    /// HALT or end of block: the packet moves on to the next stage.
    Continue,
}

/// A report produced by GEN_PKT towards the controller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDraft {
    pub tag: u32,
    pub fields: Vec<u128>,
    pub packet: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ExecError {
    #[error("instruction {0}: {1}")]
    Pool(usize, PoolError),
    #[error("instruction {0}: resource not declared by the block")]
    Undeclared(usize),
    #[error("instruction {0}: needs a packet but none is present")]
    NoPacket(usize),
    #[error("instruction {0}: field outside its address space")]
    FieldOutOfBounds(usize),
    #[error("instruction {0}: packet write in passive mode")]
    PacketWrite(usize),
    #[error("instruction {0}: invalid branch")]
    BadBranch(usize),
    #[error("instruction {0}: bad operand")]
    BadOperand(usize),
}

pub struct ExecContext<'a> {
    /// Absent in timer contexts.
    pub packet: Option<&'a mut Vec<u8>>,
    pub meta: &'a mut [u8; META_BYTES],
    pub params: &'a [u8],
    pub now: u64,
    pub mode: ExecMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExecOutcome {
    pub disposition: Option<Disposition>,
    pub reports: Vec<ReportDraft>,
    /// Probe packets to inject at a port's egress queue.
    pub generated: Vec<(PortId, Vec<u8>)>,
    pub mem_accesses: u32,
    pub steps: u32,
}

impl ExecOutcome {
    pub fn disposition(&self) -> Disposition {
        self.disposition.unwrap_or(Disposition::Continue)
    }
}

enum Log {
    Pool(Undo),
    Field(FieldRef, u128),
}

struct Machine<'c, 'a> {
    ctx: &'c mut ExecContext<'a>,
    pool: &'c mut ResourcePool,
    log: Vec<Log>,
}

impl Machine<'_, '_> {
    fn read_field(&self, pc: usize, f: &FieldRef) -> Result<u128, ExecError> {
        Ok(match f.space {
            Space::Packet => {
                let p = self.ctx.packet.as_deref().ok_or(ExecError::NoPacket(pc))?;
                read_bits(p, f.offset, f.len)
            }
            Space::Metadata => {
                if f.end() > (META_BYTES * 8) as u64 {
                    return Err(ExecError::FieldOutOfBounds(pc));
                }
                read_bits(&self.ctx.meta[..], f.offset, f.len)
            }
            Space::Params => read_bits(self.ctx.params, f.offset, f.len),
        })
    }

    fn read(&self, pc: usize, o: &Operand) -> Result<u128, ExecError> {
        match o {
            Operand::Imm(v) => Ok(*v as u128),
            Operand::Field(f) => self.read_field(pc, f),
            Operand::PktLen => self
                .ctx
                .packet
                .as_deref()
                .map(|p| p.len() as u128)
                .ok_or(ExecError::NoPacket(pc)),
        }
    }

    fn write(&mut self, pc: usize, f: &FieldRef, v: u128) -> Result<(), ExecError> {
        let old = self.read_field(pc, f)?;
        match f.space {
            Space::Packet => {
                if self.ctx.mode == ExecMode::Passive {
                    return Err(ExecError::PacketWrite(pc));
                }
                let p = self.ctx.packet.as_deref_mut().ok_or(ExecError::NoPacket(pc))?;
                if f.end() > p.len() as u64 * 8 {
                    return Err(ExecError::FieldOutOfBounds(pc));
                }
                write_bits(p, f.offset, f.len, v);
            }
            Space::Metadata => write_bits(&mut self.ctx.meta[..], f.offset, f.len, v),
            Space::Params => return Err(ExecError::BadOperand(pc)),
        }
        self.log.push(Log::Field(*f, old));
        Ok(())
    }

    fn write_opt(&mut self, pc: usize, f: &Option<FieldRef>, v: u128) -> Result<(), ExecError> {
        match f {
            Some(f) => self.write(pc, f, v),
            None => Ok(()),
        }
    }

    /// Width of a state-table key operand.
    fn key_width(o: &Operand) -> u8 {
        match o {
            Operand::Field(f) => f.len,
            _ => 64,
        }
    }

    fn rollback(&mut self) {
        while let Some(entry) = self.log.pop() {
            match entry {
                Log::Pool(u) => self.pool.undo(u),
                Log::Field(f, old) => match f.space {
                    Space::Packet => {
                        if let Some(p) = self.ctx.packet.as_deref_mut() {
                            write_bits(p, f.offset, f.len, old);
                        }
                    }
                    Space::Metadata => write_bits(&mut self.ctx.meta[..], f.offset, f.len, old),
                    Space::Params => {}
                },
            }
        }
    }
}

/// Runs `block` against `ctx`. On error no pool, packet or metadata change
/// survives and no report is emitted.
pub fn execute(
    block: &ActionBlock,
    ctx: &mut ExecContext<'_>,
    pool: &mut ResourcePool,
) -> Result<ExecOutcome, ExecError> {
    let mut m = Machine { ctx, pool, log: Vec::with_capacity(block.instructions.len()) };
    let mut out = ExecOutcome::default();
    match run(block, &mut m, &mut out) {
        Ok(()) => Ok(out),
        Err(e) => {
            m.rollback();
            Err(e)
        }
    }
}

fn run(block: &ActionBlock, m: &mut Machine<'_, '_>, out: &mut ExecOutcome) -> Result<(), ExecError> {
    let instrs = &block.instructions;
    let mut pc = 0usize;
    while pc < instrs.len() {
        let ins = &instrs[pc];
        out.steps += 1;
        if let Some(r) = ins.resource() {
            if !block.declared.contains(&r) {
                return Err(ExecError::Undeclared(pc));
            }
        }
        if ins.is_mem_access() {
            out.mem_accesses += 1;
        }
        let perr = |e| ExecError::Pool(pc, e);
        let mut next = pc + 1;
        match ins {
            Instruction::Nop => {}
            Instruction::SetField { dst, imm } => m.write(pc, dst, *imm as u128)?,
            Instruction::Move { dst, src } => {
                let v = m.read_field(pc, src)?;
                m.write(pc, dst, v)?;
            }
            Instruction::Alu { op, dst, lhs, rhs } => {
                let a = m.read(pc, lhs)?;
                let b = m.read(pc, rhs)?;
                let v = match op {
                    AluOp::Add => a.wrapping_add(b),
                    AluOp::Sub => a.wrapping_sub(b),
                    AluOp::And => a & b,
                    AluOp::Or => a | b,
                    AluOp::Shl => {
                        if b >= 128 {
                            0
                        } else {
                            a << b
                        }
                    }
                    AluOp::Shr => {
                        if b >= 128 {
                            0
                        } else {
                            a >> b
                        }
                    }
                };
                m.write(pc, dst, v)?;
            }
            Instruction::Branch { cond, lhs, rhs, offset } => {
                if *offset <= 0 || pc + *offset as usize > instrs.len() {
                    return Err(ExecError::BadBranch(pc));
                }
                if cond.holds(m.read(pc, lhs)?, m.read(pc, rhs)?) {
                    next = pc + *offset as usize;
                }
            }
            Instruction::CntrAdd { counter, delta, dst } => {
                let d = m.read(pc, delta)? as u64 as i64;
                let (post, u) = m.pool.counter_add(*counter, d).map_err(perr)?;
                m.log.push(Log::Pool(u));
                m.write_opt(pc, dst, post as u128)?;
            }
            Instruction::CntrSet { counter, value } => {
                let v = m.read(pc, value)? as u64;
                let u = m.pool.counter_set(*counter, v).map_err(perr)?;
                m.log.push(Log::Pool(u));
            }
            Instruction::MeterCheck { meter, dst } => {
                let bytes = m.read(pc, &Operand::PktLen)? as u64;
                let (color, u) = m.pool.meter_mark(*meter, bytes, m.ctx.now).map_err(perr)?;
                m.log.push(Log::Pool(u));
                m.write(pc, dst, color as u128)?;
            }
            Instruction::RegRead { reg, dst } => {
                let v = m.pool.register(*reg).map_err(perr)?;
                m.write(pc, dst, v as u128)?;
            }
            Instruction::RegWrite { reg, src } => {
                let v = m.read(pc, src)? as u64;
                let u = m.pool.register_write_undo(*reg, v).map_err(perr)?;
                m.log.push(Log::Pool(u));
            }
            Instruction::StbInsert { stb, key, value, dst } => {
                let k = m.read(pc, key)?;
                let v = m.read(pc, value)? as u64;
                let w = Machine::key_width(key);
                let now = m.ctx.now;
                let (res, u) = m.pool.stb_insert_undo(*stb, k, w, v, now).map_err(perr)?;
                m.log.push(Log::Pool(u));
                m.write_opt(pc, dst, (res == StbInsertResult::Inserted) as u128)?;
            }
            Instruction::StbDelete { stb, key, dst } => {
                let k = m.read(pc, key)?;
                let w = Machine::key_width(key);
                let u = m.pool.stb_delete_undo(*stb, k, w).map_err(perr)?;
                let removed = u.is_some();
                if let Some(u) = u {
                    m.log.push(Log::Pool(u));
                }
                m.write_opt(pc, dst, removed as u128)?;
            }
            Instruction::StbLookup { stb, key, hit, value } => {
                let k = m.read(pc, key)?;
                let w = Machine::key_width(key);
                let e = m.pool.stb_lookup(*stb, k, w).map_err(perr)?;
                m.write(pc, hit, e.is_some() as u128)?;
                m.write_opt(pc, value, e.map(|e| e.value).unwrap_or(0) as u128)?;
            }
            Instruction::Timestamp { dst } => {
                let now = m.ctx.now;
                m.write(pc, dst, now as u128)?;
            }
            Instruction::GenPkt { dest, tag, fields, mirror } => {
                let vals = fields
                    .iter()
                    .map(|f| m.read(pc, f))
                    .collect::<Result<Vec<_>, _>>()?;
                let copy = if *mirror {
                    Some(m.ctx.packet.as_deref().ok_or(ExecError::NoPacket(pc))?.clone())
                } else {
                    None
                };
                match dest {
                    GenDest::Controller => out.reports.push(ReportDraft {
                        tag: *tag,
                        fields: vals,
                        packet: copy,
                    }),
                    GenDest::Port(p) => {
                        let pkt = copy.unwrap_or_else(|| probe_packet(&vals));
                        out.generated.push((*p, pkt));
                    }
                }
            }
            Instruction::SampleTest { sampler, n, dst } => {
                if *n == 0 {
                    return Err(ExecError::BadOperand(pc));
                }
                let (hit, u) = m.pool.sample(*sampler, *n).map_err(perr)?;
                m.log.push(Log::Pool(u));
                m.write(pc, dst, hit as u128)?;
            }
            Instruction::Output { port } => {
                if m.ctx.packet.is_none() {
                    return Err(ExecError::NoPacket(pc));
                }
                let p = m.read(pc, port)?;
                let p = PortId::try_from(p).map_err(|_| ExecError::BadOperand(pc))?;
                out.disposition = Some(Disposition::Output(p));
                return Ok(());
            }
            Instruction::GotoTable { table } => {
                if m.ctx.packet.is_none() {
                    return Err(ExecError::NoPacket(pc));
                }
                out.disposition = Some(Disposition::Goto(*table));
                return Ok(());
            }
            Instruction::Drop => {
                out.disposition = Some(Disposition::Drop);
                return Ok(());
            }
            Instruction::Halt => {
                out.disposition = Some(Disposition::Continue);
                return Ok(());
            }
        }
        pc = next;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::{AllocRequest, CounterUnit};
    use crate::vm::{meta, Cond};

    fn counter(pool: &mut ResourcePool) -> CounterId {
        match pool.alloc(AllocRequest::Counter { unit: CounterUnit::Packets }).unwrap() {
            ResourceHandle::Counter(c) => c,
            _ => unreachable!(),
        }
    }

    fn run_on(block: &ActionBlock, pool: &mut ResourcePool, pkt: &mut Vec<u8>) -> Result<ExecOutcome, ExecError> {
        let mut md = [0u8; META_BYTES];
        let mut ctx = ExecContext { packet: Some(pkt), meta: &mut md, params: &[], now: 5, mode: ExecMode::Passive };
        execute(block, &mut ctx, pool)
    }

    #[test]
    fn threshold_report_fires_once_per_hundred() {
        let mut pool = ResourcePool::default();
        let c = counter(&mut pool);
        let s = meta::scratch(0);
        let b = ActionBlock::new(vec![
            Instruction::CntrAdd { counter: c, delta: Operand::Imm(1), dst: Some(s) },
            Instruction::Branch { cond: Cond::Ne, lhs: s.into(), rhs: Operand::Imm(100), offset: 3 },
            Instruction::GenPkt { dest: GenDest::Controller, tag: 9, fields: vec![s.into()], mirror: false },
            Instruction::CntrSet { counter: c, value: Operand::Imm(0) },
        ]);
        let mut pkt = vec![0u8; 64];
        let mut reports = 0;
        for _ in 0..250 {
            let o = run_on(&b, &mut pool, &mut pkt).unwrap();
            assert_eq!(o.disposition(), Disposition::Continue);
            reports += o.reports.len();
            if let Some(r) = o.reports.first() {
                assert_eq!(r.fields, vec![100]);
            }
        }
        assert_eq!(reports, 2);
        assert_eq!(pool.counter(c).unwrap().value, 50);
    }

    #[test]
    fn fault_rolls_back_everything() {
        let mut pool = ResourcePool::default();
        let c = counter(&mut pool);
        let missing = CounterId(999);
        let mut b = ActionBlock::new(vec![
            Instruction::CntrAdd { counter: c, delta: Operand::Imm(3), dst: Some(meta::scratch(0)) },
            Instruction::GenPkt { dest: GenDest::Controller, tag: 1, fields: vec![], mirror: false },
            Instruction::CntrAdd { counter: missing, delta: Operand::Imm(1), dst: None },
        ]);
        b.declared.insert(ResourceHandle::Counter(missing));
        let mut md = [0u8; META_BYTES];
        let mut pkt = vec![0u8; 64];
        let mut ctx = ExecContext { packet: Some(&mut pkt), meta: &mut md, params: &[], now: 0, mode: ExecMode::Passive };
        let e = execute(&b, &mut ctx, &mut pool).unwrap_err();
        assert!(matches!(e, ExecError::Pool(2, _)));
        assert_eq!(pool.counter(c).unwrap().value, 0);
        assert_eq!(md, [0u8; META_BYTES]);
    }

    #[test]
    fn signed_delta_saturates() {
        let mut pool = ResourcePool::default();
        let c = counter(&mut pool);
        let b = ActionBlock::new(vec![Instruction::CntrAdd { counter: c, delta: Operand::Imm(u64::MAX), dst: None }]);
        run_on(&b, &mut pool, &mut vec![0; 20]).unwrap();
        assert_eq!(pool.counter(c).unwrap().value, 0);
    }

    #[test]
    fn timer_context_has_no_packet() {
        let mut pool = ResourcePool::default();
        let b = ActionBlock::new(vec![Instruction::Output { port: Operand::Imm(1) }]);
        let mut md = [0u8; META_BYTES];
        let mut ctx = ExecContext { packet: None, meta: &mut md, params: &[], now: 0, mode: ExecMode::Passive };
        assert_eq!(execute(&b, &mut ctx, &mut pool), Err(ExecError::NoPacket(0)));
    }

    #[test]
    fn probe_packet_layout() {
        let p = probe_packet(&[0x0102, 7]);
        assert_eq!(p.len(), 64);
        assert!(is_probe_packet(&p));
        assert_eq!(read_bits(&p, PROBE_FIELDS_BIT, 64), 0x0102);
        assert_eq!(read_bits(&p, PROBE_FIELDS_BIT + 64, 64), 7);
    }

    #[test]
    fn branch_skips_exactly_offset() {
        let mut pool = ResourcePool::default();
        let s = meta::scratch(1);
        let b = ActionBlock::new(vec![
            Instruction::Branch { cond: Cond::Eq, lhs: Operand::Imm(1), rhs: Operand::Imm(1), offset: 2 },
            Instruction::Drop,
            Instruction::SetField { dst: s, imm: 4 },
            Instruction::Output { port: s.into() },
        ]);
        let o = run_on(&b, &mut pool, &mut vec![0; 20]).unwrap();
        assert_eq!(o.disposition(), Disposition::Output(4));
        assert_eq!(o.steps, 3);
    }
}
