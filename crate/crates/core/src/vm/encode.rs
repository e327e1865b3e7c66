//! Compact little-endian wire encoding of action blocks.
//!
//! Layout: `u8 n`, then `n` instructions (opcode byte followed by operands),
//! then `u8 m` and `m` declared handles as `(class u8, index u32)`.

use thiserror::Error;

use super::{ActionBlock, AluOp, Cond, GenDest, Instruction, Operand};
use crate::field::{FieldRef, Space};
use crate::ids::*;

mod op {
    pub const NOP: u8 = 0x00;
    pub const SET_FIELD: u8 = 0x01;
    pub const MOVE: u8 = 0x02;
    pub const ADD: u8 = 0x03;
    pub const SUB: u8 = 0x04;
    pub const AND: u8 = 0x05;
    pub const OR: u8 = 0x06;
    pub const SHL: u8 = 0x07;
    pub const SHR: u8 = 0x08;
    pub const BRANCH_EQ: u8 = 0x10;
    pub const BRANCH_NE: u8 = 0x11;
    pub const BRANCH_GE: u8 = 0x12;
    pub const BRANCH_LT: u8 = 0x13;
    pub const CNTR_ADD: u8 = 0x20;
    pub const CNTR_SET: u8 = 0x21;
    pub const METER_CHECK: u8 = 0x22;
    pub const REG_READ: u8 = 0x23;
    pub const REG_WRITE: u8 = 0x24;
    pub const STB_INSERT: u8 = 0x25;
    pub const STB_DELETE: u8 = 0x26;
    pub const STB_LOOKUP: u8 = 0x27;
    pub const TIMESTAMP: u8 = 0x30;
    pub const GEN_PKT: u8 = 0x31;
    pub const SAMPLE_TEST: u8 = 0x32;
    pub const OUTPUT: u8 = 0x40;
    pub const GOTO_TABLE: u8 = 0x41;
    pub const DROP: u8 = 0x42;
    pub const HALT: u8 = 0x43;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("block encoding truncated")]
    Truncated,
    #[error("unknown opcode {0:#04x}")]
    UnknownOpcode(u8),
    #[error("bad operand tag {0}")]
    BadTag(u8),
    #[error("bad field reference")]
    BadField,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("block too long to encode")]
    TooLong,
}

struct W(Vec<u8>);

impl W {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn field(&mut self, f: &FieldRef) {
        self.u8(match f.space {
            Space::Packet => 0,
            Space::Metadata => 1,
            Space::Params => 2,
        });
        self.u32(f.offset);
        self.u8(f.len);
    }
    fn opt_field(&mut self, f: &Option<FieldRef>) {
        match f {
            Some(f) => {
                self.u8(1);
                self.field(f);
            }
            None => self.u8(0),
        }
    }
    fn operand(&mut self, o: &Operand) {
        match o {
            Operand::Imm(v) => {
                self.u8(0);
                self.u64(*v);
            }
            Operand::Field(f) => {
                self.u8(1);
                self.field(f);
            }
            Operand::PktLen => self.u8(2),
        }
    }
}

struct R<'a> {
    buf: &'a [u8],
    at: usize,
}

impl R<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DecodeError> {
        let s = self.buf.get(self.at..self.at + n).ok_or(DecodeError::Truncated)?;
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn field(&mut self) -> Result<FieldRef, DecodeError> {
        let space = match self.u8()? {
            0 => Space::Packet,
            1 => Space::Metadata,
            2 => Space::Params,
            _ => return Err(DecodeError::BadField),
        };
        let offset = self.u32()?;
        let len = self.u8()?;
        if len == 0 || len > 128 {
            return Err(DecodeError::BadField);
        }
        Ok(FieldRef::new(space, offset, len))
    }
    fn opt_field(&mut self) -> Result<Option<FieldRef>, DecodeError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.field()?)),
            t => Err(DecodeError::BadTag(t)),
        }
    }
    fn operand(&mut self) -> Result<Operand, DecodeError> {
        match self.u8()? {
            0 => Ok(Operand::Imm(self.u64()?)),
            1 => Ok(Operand::Field(self.field()?)),
            2 => Ok(Operand::PktLen),
            t => Err(DecodeError::BadTag(t)),
        }
    }
}

fn alu_code(op: AluOp) -> u8 {
    match op {
        AluOp::Add => op::ADD,
        AluOp::Sub => op::SUB,
        AluOp::And => op::AND,
        AluOp::Or => op::OR,
        AluOp::Shl => op::SHL,
        AluOp::Shr => op::SHR,
    }
}

fn cond_code(c: Cond) -> u8 {
    match c {
        Cond::Eq => op::BRANCH_EQ,
        Cond::Ne => op::BRANCH_NE,
        Cond::Ge => op::BRANCH_GE,
        Cond::Lt => op::BRANCH_LT,
    }
}

pub fn encode_block(block: &ActionBlock) -> Result<Vec<u8>, DecodeError> {
    if block.instructions.len() > u8::MAX as usize || block.declared.len() > u8::MAX as usize {
        return Err(DecodeError::TooLong);
    }
    let mut w = W(Vec::with_capacity(16 * block.instructions.len() + 2));
    w.u8(block.instructions.len() as u8);
    for ins in &block.instructions {
        encode_instruction(&mut w, ins)?;
    }
    w.u8(block.declared.len() as u8);
    for h in &block.declared {
        w.u8(h.class().code());
        w.u32(h.index());
    }
    Ok(w.0)
}

fn encode_instruction(w: &mut W, ins: &Instruction) -> Result<(), DecodeError> {
    use Instruction::*;
    match ins {
        Nop => w.u8(op::NOP),
        SetField { dst, imm } => {
            w.u8(op::SET_FIELD);
            w.field(dst);
            w.u64(*imm);
        }
        Move { dst, src } => {
            w.u8(op::MOVE);
            w.field(dst);
            w.field(src);
        }
        Alu { op, dst, lhs, rhs } => {
            w.u8(alu_code(*op));
            w.field(dst);
            w.operand(lhs);
            w.operand(rhs);
        }
        Branch { cond, lhs, rhs, offset } => {
            w.u8(cond_code(*cond));
            w.operand(lhs);
            w.operand(rhs);
            w.u16(*offset as u16);
        }
        CntrAdd { counter, delta, dst } => {
            w.u8(op::CNTR_ADD);
            w.u32(counter.0);
            w.operand(delta);
            w.opt_field(dst);
        }
        CntrSet { counter, value } => {
            w.u8(op::CNTR_SET);
            w.u32(counter.0);
            w.operand(value);
        }
        MeterCheck { meter, dst } => {
            w.u8(op::METER_CHECK);
            w.u32(meter.0);
            w.field(dst);
        }
        RegRead { reg, dst } => {
            w.u8(op::REG_READ);
            w.u32(reg.0);
            w.field(dst);
        }
        RegWrite { reg, src } => {
            w.u8(op::REG_WRITE);
            w.u32(reg.0);
            w.operand(src);
        }
        StbInsert { stb, key, value, dst } => {
            w.u8(op::STB_INSERT);
            w.u32(stb.0);
            w.operand(key);
            w.operand(value);
            w.opt_field(dst);
        }
        StbDelete { stb, key, dst } => {
            w.u8(op::STB_DELETE);
            w.u32(stb.0);
            w.operand(key);
            w.opt_field(dst);
        }
        StbLookup { stb, key, hit, value } => {
            w.u8(op::STB_LOOKUP);
            w.u32(stb.0);
            w.operand(key);
            w.field(hit);
            w.opt_field(value);
        }
        Timestamp { dst } => {
            w.u8(op::TIMESTAMP);
            w.field(dst);
        }
        GenPkt { dest, tag, fields, mirror } => {
            w.u8(op::GEN_PKT);
            match dest {
                GenDest::Controller => {
                    w.u8(0);
                    w.u16(0);
                }
                GenDest::Port(p) => {
                    w.u8(1);
                    w.u16(*p);
                }
            }
            w.u32(*tag);
            w.u8(*mirror as u8);
            if fields.len() > u8::MAX as usize {
                return Err(DecodeError::TooLong);
            }
            w.u8(fields.len() as u8);
            for f in fields {
                w.operand(f);
            }
        }
        SampleTest { sampler, n, dst } => {
            w.u8(op::SAMPLE_TEST);
            w.u32(sampler.0);
            w.u32(*n);
            w.field(dst);
        }
        Output { port } => {
            w.u8(op::OUTPUT);
            w.operand(port);
        }
        GotoTable { table } => {
            w.u8(op::GOTO_TABLE);
            w.u16(*table);
        }
        Drop => w.u8(op::DROP),
        Halt => w.u8(op::HALT),
    }
    Ok(())
}

/// Decodes a block. The whole buffer must be consumed.
pub fn decode_block(buf: &[u8]) -> Result<ActionBlock, DecodeError> {
    let mut r = R { buf, at: 0 };
    let n = r.u8()? as usize;
    let mut instructions = Vec::with_capacity(n);
    for _ in 0..n {
        instructions.push(decode_instruction(&mut r)?);
    }
    let m = r.u8()? as usize;
    let mut declared = std::collections::BTreeSet::new();
    for _ in 0..m {
        let class = ResourceClass::from_code(r.u8()?).ok_or(DecodeError::BadField)?;
        let idx = r.u32()?;
        declared.insert(ResourceHandle::from_parts(class, idx).ok_or(DecodeError::BadField)?);
    }
    if r.at != buf.len() {
        return Err(DecodeError::Trailing(buf.len() - r.at));
    }
    Ok(ActionBlock { instructions, declared })
}

fn decode_instruction(r: &mut R<'_>) -> Result<Instruction, DecodeError> {
    use Instruction::*;
    let code = r.u8()?;
    Ok(match code {
        op::NOP => Nop,
        op::SET_FIELD => SetField { dst: r.field()?, imm: r.u64()? },
        op::MOVE => Move { dst: r.field()?, src: r.field()? },
        op::ADD..=op::SHR => {
            let op = match code {
                op::ADD => AluOp::Add,
                op::SUB => AluOp::Sub,
                op::AND => AluOp::And,
                op::OR => AluOp::Or,
                op::SHL => AluOp::Shl,
                _ => AluOp::Shr,
            };
            Alu { op, dst: r.field()?, lhs: r.operand()?, rhs: r.operand()? }
        }
        op::BRANCH_EQ..=op::BRANCH_LT => {
            let cond = match code {
                op::BRANCH_EQ => Cond::Eq,
                op::BRANCH_NE => Cond::Ne,
                op::BRANCH_GE => Cond::Ge,
                _ => Cond::Lt,
            };
            Branch { cond, lhs: r.operand()?, rhs: r.operand()?, offset: r.u16()? as i16 }
        }
        op::CNTR_ADD => CntrAdd { counter: CounterId(r.u32()?), delta: r.operand()?, dst: r.opt_field()? },
        op::CNTR_SET => CntrSet { counter: CounterId(r.u32()?), value: r.operand()? },
        op::METER_CHECK => MeterCheck { meter: MeterId(r.u32()?), dst: r.field()? },
        op::REG_READ => RegRead { reg: RegisterId(r.u32()?), dst: r.field()? },
        op::REG_WRITE => RegWrite { reg: RegisterId(r.u32()?), src: r.operand()? },
        op::STB_INSERT => StbInsert {
            stb: StbId(r.u32()?),
            key: r.operand()?,
            value: r.operand()?,
            dst: r.opt_field()?,
        },
        op::STB_DELETE => StbDelete { stb: StbId(r.u32()?), key: r.operand()?, dst: r.opt_field()? },
        op::STB_LOOKUP => StbLookup {
            stb: StbId(r.u32()?),
            key: r.operand()?,
            hit: r.field()?,
            value: r.opt_field()?,
        },
        op::TIMESTAMP => Timestamp { dst: r.field()? },
        op::GEN_PKT => {
            let kind = r.u8()?;
            let port = r.u16()?;
            let dest = match kind {
                0 => GenDest::Controller,
                1 => GenDest::Port(port),
                t => return Err(DecodeError::BadTag(t)),
            };
            let tag = r.u32()?;
            let mirror = match r.u8()? {
                0 => false,
                1 => true,
                t => return Err(DecodeError::BadTag(t)),
            };
            let n = r.u8()?;
            let fields = (0..n).map(|_| r.operand()).collect::<Result<_, _>>()?;
            GenPkt { dest, tag, fields, mirror }
        }
        op::SAMPLE_TEST => SampleTest { sampler: SamplerId(r.u32()?), n: r.u32()?, dst: r.field()? },
        op::OUTPUT => Output { port: r.operand()? },
        op::GOTO_TABLE => GotoTable { table: r.u16()? },
        op::DROP => Drop,
        op::HALT => Halt,
        other => return Err(DecodeError::UnknownOpcode(other)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn arb_field() -> impl Strategy<Value = FieldRef> {
        (0u8..3, 0u32..4096, 1u8..=128).prop_map(|(s, o, l)| {
            let space = [Space::Packet, Space::Metadata, Space::Params][s as usize];
            FieldRef::new(space, o, l)
        })
    }

    fn arb_operand() -> impl Strategy<Value = Operand> {
        prop_oneof![
            any::<u64>().prop_map(Operand::Imm),
            arb_field().prop_map(Operand::Field),
            Just(Operand::PktLen),
        ]
    }

    fn arb_instruction() -> impl Strategy<Value = Instruction> {
        use Instruction::*;
        let alu = prop_oneof![
            Just(AluOp::Add),
            Just(AluOp::Sub),
            Just(AluOp::And),
            Just(AluOp::Or),
            Just(AluOp::Shl),
            Just(AluOp::Shr)
        ];
        let cond = prop_oneof![Just(Cond::Eq), Just(Cond::Ne), Just(Cond::Ge), Just(Cond::Lt)];
        prop_oneof![
            Just(Nop),
            Just(Drop),
            Just(Halt),
            (arb_field(), any::<u64>()).prop_map(|(dst, imm)| SetField { dst, imm }),
            (arb_field(), arb_field()).prop_map(|(dst, src)| Move { dst, src }),
            (alu, arb_field(), arb_operand(), arb_operand())
                .prop_map(|(op, dst, lhs, rhs)| Alu { op, dst, lhs, rhs }),
            (cond, arb_operand(), arb_operand(), any::<i16>())
                .prop_map(|(cond, lhs, rhs, offset)| Branch { cond, lhs, rhs, offset }),
            (any::<u32>(), arb_operand(), proptest::option::of(arb_field()))
                .prop_map(|(c, delta, dst)| CntrAdd { counter: CounterId(c), delta, dst }),
            (any::<u32>(), arb_operand()).prop_map(|(c, value)| CntrSet { counter: CounterId(c), value }),
            (any::<u32>(), arb_field()).prop_map(|(m, dst)| MeterCheck { meter: MeterId(m), dst }),
            (any::<u32>(), arb_field()).prop_map(|(r, dst)| RegRead { reg: RegisterId(r), dst }),
            (any::<u32>(), arb_operand()).prop_map(|(r, src)| RegWrite { reg: RegisterId(r), src }),
            (any::<u32>(), arb_operand(), arb_operand(), proptest::option::of(arb_field()))
                .prop_map(|(t, key, value, dst)| StbInsert { stb: StbId(t), key, value, dst }),
            (any::<u32>(), arb_operand(), proptest::option::of(arb_field()))
                .prop_map(|(t, key, dst)| StbDelete { stb: StbId(t), key, dst }),
            (any::<u32>(), arb_operand(), arb_field(), proptest::option::of(arb_field()))
                .prop_map(|(t, key, hit, value)| StbLookup { stb: StbId(t), key, hit, value }),
            arb_field().prop_map(|dst| Timestamp { dst }),
            (
                proptest::option::of(any::<u16>()),
                any::<u32>(),
                proptest::collection::vec(arb_operand(), 0..5),
                any::<bool>()
            )
                .prop_map(|(p, tag, fields, mirror)| GenPkt {
                    dest: p.map(GenDest::Port).unwrap_or(GenDest::Controller),
                    tag,
                    fields,
                    mirror
                }),
            (any::<u32>(), any::<u32>(), arb_field())
                .prop_map(|(s, n, dst)| SampleTest { sampler: SamplerId(s), n, dst }),
            arb_operand().prop_map(|port| Output { port }),
            any::<u16>().prop_map(|table| GotoTable { table }),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(instrs in proptest::collection::vec(arb_instruction(), 0..64)) {
            let block = ActionBlock::new(instrs);
            let bytes = encode_block(&block).unwrap();
            prop_assert_eq!(decode_block(&bytes).unwrap(), block);
        }

        #[test]
        fn truncation_is_detected(instrs in proptest::collection::vec(arb_instruction(), 1..8), cut in 1usize..64) {
            let bytes = encode_block(&ActionBlock::new(instrs)).unwrap();
            let cut = cut.min(bytes.len());
            prop_assert!(decode_block(&bytes[..bytes.len() - cut]).is_err());
        }
    }

    #[test]
    fn rejects_unknown_opcode_and_trailing() {
        assert_eq!(decode_block(&[1, 0xEE, 0]), Err(DecodeError::UnknownOpcode(0xEE)));
        assert_eq!(decode_block(&[0, 0, 9]), Err(DecodeError::Trailing(1)));
    }
}
