//! Text form of action blocks, one instruction per line.
//!
//! ```text
//! CNTR_ADD c0, #1 -> meta:1024:64   ; post-value into scratch
//! BRANCH_NE meta:1024:64, #100, +3
//! GEN_PKT ctrl, tag=1, meta:1024:64
//! CNTR_SET c0, #0
//! ```

use std::fmt::Write as _;

use thiserror::Error;

use super::{ActionBlock, AluOp, Cond, GenDest, Instruction, Operand};
use crate::field::FieldRef;
use crate::ids::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct AsmError {
    pub line: usize,
    pub msg: String,
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, AsmError> {
    Err(AsmError { line, msg: msg.into() })
}

struct Line<'a> {
    no: usize,
    args: Vec<&'a str>,
    dst: Vec<&'a str>,
}

impl<'a> Line<'a> {
    fn argc(&self, n: usize) -> Result<(), AsmError> {
        if self.args.len() != n {
            return err(self.no, format!("expected {n} arguments, got {}", self.args.len()));
        }
        Ok(())
    }

    fn dstc(&self, min: usize, max: usize) -> Result<(), AsmError> {
        if self.dst.len() < min || self.dst.len() > max {
            return err(self.no, "wrong number of destinations");
        }
        Ok(())
    }

    fn field(&self, s: &str) -> Result<FieldRef, AsmError> {
        s.parse().or_else(|e| err(self.no, format!("{e}")))
    }

    fn operand(&self, s: &str) -> Result<Operand, AsmError> {
        if s == "pktlen" {
            return Ok(Operand::PktLen);
        }
        if let Some(imm) = s.strip_prefix('#') {
            return self.imm(imm).map(Operand::Imm);
        }
        self.field(s).map(Operand::Field)
    }

    fn imm(&self, s: &str) -> Result<u64, AsmError> {
        let parsed = if let Some(neg) = s.strip_prefix('-') {
            neg.parse::<i64>().ok().map(|v| v.wrapping_neg() as u64)
        } else if let Some(hex) = s.strip_prefix("0x") {
            u64::from_str_radix(hex, 16).ok()
        } else {
            s.parse().ok()
        };
        parsed.map_or_else(|| err(self.no, format!("bad immediate `{s}`")), Ok)
    }

    fn handle(&self, s: &str, prefix: char) -> Result<u32, AsmError> {
        s.strip_prefix(prefix)
            .and_then(|n| n.parse().ok())
            .map_or_else(|| err(self.no, format!("expected {prefix}<n>, got `{s}`")), Ok)
    }

    fn opt_dst(&self) -> Result<Option<FieldRef>, AsmError> {
        self.dstc(0, 1)?;
        self.dst.first().map(|d| self.field(d)).transpose()
    }

    fn one_dst(&self) -> Result<FieldRef, AsmError> {
        self.dstc(1, 1)?;
        self.field(self.dst[0])
    }
}

fn split_args(s: &str) -> Vec<&str> {
    s.split(',').map(str::trim).filter(|a| !a.is_empty()).collect()
}

pub fn assemble(src: &str) -> Result<ActionBlock, AsmError> {
    let mut out = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let text = raw.split(';').next().unwrap_or("").trim();
        if text.is_empty() {
            continue;
        }
        let (mnemonic, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
        let (args, dst) = match rest.split_once("->") {
            Some((a, d)) => (split_args(a), split_args(d)),
            None => (split_args(rest), Vec::new()),
        };
        let line = Line { no: i + 1, args, dst };
        out.push(parse_instruction(&mnemonic.to_ascii_uppercase(), &line)?);
    }
    Ok(ActionBlock::new(out))
}

fn parse_instruction(m: &str, l: &Line<'_>) -> Result<Instruction, AsmError> {
    use Instruction::*;
    let a = &l.args;
    let alu = |op| -> Result<Instruction, AsmError> {
        l.argc(2)?;
        Ok(Alu { op, dst: l.one_dst()?, lhs: l.operand(a[0])?, rhs: l.operand(a[1])? })
    };
    let branch = |cond| -> Result<Instruction, AsmError> {
        l.argc(3)?;
        l.dstc(0, 0)?;
        let off = a[2].strip_prefix('+').unwrap_or(a[2]);
        let offset = off.parse::<i16>().or_else(|_| err(l.no, format!("bad offset `{}`", a[2])))?;
        Ok(Branch { cond, lhs: l.operand(a[0])?, rhs: l.operand(a[1])?, offset })
    };
    let bare = |ins: Instruction| -> Result<Instruction, AsmError> {
        l.argc(0)?;
        l.dstc(0, 0)?;
        Ok(ins)
    };
    match m {
        "NOP" => bare(Nop),
        "DROP" => bare(Drop),
        "HALT" => bare(Halt),
        "SET_FIELD" => {
            l.argc(2)?;
            l.dstc(0, 0)?;
            let imm = a[1].strip_prefix('#').unwrap_or(a[1]);
            Ok(SetField { dst: l.field(a[0])?, imm: l.imm(imm)? })
        }
        "MOVE" => {
            l.argc(2)?;
            l.dstc(0, 0)?;
            Ok(Move { dst: l.field(a[0])?, src: l.field(a[1])? })
        }
        "ADD" => alu(AluOp::Add),
        "SUB" => alu(AluOp::Sub),
        "AND" => alu(AluOp::And),
        "OR" => alu(AluOp::Or),
        "SHL" => alu(AluOp::Shl),
        "SHR" => alu(AluOp::Shr),
        "BRANCH_EQ" => branch(Cond::Eq),
        "BRANCH_NE" => branch(Cond::Ne),
        "BRANCH_GE" => branch(Cond::Ge),
        "BRANCH_LT" => branch(Cond::Lt),
        "CNTR_ADD" => {
            l.argc(2)?;
            Ok(CntrAdd { counter: CounterId(l.handle(a[0], 'c')?), delta: l.operand(a[1])?, dst: l.opt_dst()? })
        }
        "CNTR_SET" => {
            l.argc(2)?;
            l.dstc(0, 0)?;
            Ok(CntrSet { counter: CounterId(l.handle(a[0], 'c')?), value: l.operand(a[1])? })
        }
        "METER_CHECK" => {
            l.argc(1)?;
            Ok(MeterCheck { meter: MeterId(l.handle(a[0], 'm')?), dst: l.one_dst()? })
        }
        "REG_READ" => {
            l.argc(1)?;
            Ok(RegRead { reg: RegisterId(l.handle(a[0], 'r')?), dst: l.one_dst()? })
        }
        "REG_WRITE" => {
            l.argc(2)?;
            l.dstc(0, 0)?;
            Ok(RegWrite { reg: RegisterId(l.handle(a[0], 'r')?), src: l.operand(a[1])? })
        }
        "STB_INSERT" => {
            l.argc(3)?;
            Ok(StbInsert {
                stb: StbId(l.handle(a[0], 't')?),
                key: l.operand(a[1])?,
                value: l.operand(a[2])?,
                dst: l.opt_dst()?,
            })
        }
        "STB_DELETE" => {
            l.argc(2)?;
            Ok(StbDelete { stb: StbId(l.handle(a[0], 't')?), key: l.operand(a[1])?, dst: l.opt_dst()? })
        }
        "STB_LOOKUP" => {
            l.argc(2)?;
            l.dstc(1, 2)?;
            Ok(StbLookup {
                stb: StbId(l.handle(a[0], 't')?),
                key: l.operand(a[1])?,
                hit: l.field(l.dst[0])?,
                value: l.dst.get(1).map(|d| l.field(d)).transpose()?,
            })
        }
        "TIMESTAMP" => {
            l.argc(0)?;
            Ok(Timestamp { dst: l.one_dst()? })
        }
        "GEN_PKT" => {
            l.dstc(0, 0)?;
            let mut it = a.iter();
            let dest = match it.next() {
                Some(&"ctrl") => GenDest::Controller,
                Some(d) if d.starts_with("port=") => GenDest::Port(
                    d[5..].parse().or_else(|_| err(l.no, format!("bad port `{d}`")))?,
                ),
                _ => return err(l.no, "GEN_PKT needs ctrl or port=<n>"),
            };
            let tag = match it.next().and_then(|t| t.strip_prefix("tag=")) {
                Some(t) => t.parse().or_else(|_| err(l.no, format!("bad tag `{t}`")))?,
                None => return err(l.no, "GEN_PKT needs tag=<n>"),
            };
            let mut fields = Vec::new();
            let mut mirror = false;
            for f in it {
                if *f == "mirror" {
                    mirror = true;
                } else if mirror {
                    return err(l.no, "mirror must be last");
                } else {
                    fields.push(l.operand(f)?);
                }
            }
            Ok(GenPkt { dest, tag, fields, mirror })
        }
        "SAMPLE_TEST" => {
            l.argc(2)?;
            let n = a[1].strip_prefix('#').unwrap_or(a[1]);
            let n = n.parse().or_else(|_| err(l.no, format!("bad rate `{n}`")))?;
            Ok(SampleTest { sampler: SamplerId(l.handle(a[0], 's')?), n, dst: l.one_dst()? })
        }
        "OUTPUT" => {
            l.argc(1)?;
            l.dstc(0, 0)?;
            Ok(Output { port: l.operand(a[0])? })
        }
        "GOTO_TABLE" => {
            l.argc(1)?;
            l.dstc(0, 0)?;
            let t = a[0].parse().or_else(|_| err(l.no, format!("bad table `{}`", a[0])))?;
            Ok(GotoTable { table: t })
        }
        other => err(l.no, format!("unknown mnemonic `{other}`")),
    }
}

fn fmt_operand(o: &Operand) -> String {
    match o {
        Operand::Imm(v) => format!("#{v}"),
        Operand::Field(f) => f.to_string(),
        Operand::PktLen => "pktlen".into(),
    }
}

fn fmt_instruction(ins: &Instruction) -> String {
    use Instruction::*;
    let opt = |d: &Option<FieldRef>| d.map(|d| format!(" -> {d}")).unwrap_or_default();
    match ins {
        Nop => "NOP".into(),
        Drop => "DROP".into(),
        Halt => "HALT".into(),
        SetField { dst, imm } => format!("SET_FIELD {dst}, #{imm}"),
        Move { dst, src } => format!("MOVE {dst}, {src}"),
        Alu { op, dst, lhs, rhs } => {
            let m = match op {
                AluOp::Add => "ADD",
                AluOp::Sub => "SUB",
                AluOp::And => "AND",
                AluOp::Or => "OR",
                AluOp::Shl => "SHL",
                AluOp::Shr => "SHR",
            };
            format!("{m} {}, {} -> {dst}", fmt_operand(lhs), fmt_operand(rhs))
        }
        Branch { cond, lhs, rhs, offset } => {
            let m = match cond {
                Cond::Eq => "BRANCH_EQ",
                Cond::Ne => "BRANCH_NE",
                Cond::Ge => "BRANCH_GE",
                Cond::Lt => "BRANCH_LT",
            };
            let off = if *offset > 0 { format!("+{offset}") } else { offset.to_string() };
            format!("{m} {}, {}, {off}", fmt_operand(lhs), fmt_operand(rhs))
        }
        CntrAdd { counter, delta, dst } => format!("CNTR_ADD {counter}, {}{}", fmt_operand(delta), opt(dst)),
        CntrSet { counter, value } => format!("CNTR_SET {counter}, {}", fmt_operand(value)),
        MeterCheck { meter, dst } => format!("METER_CHECK {meter} -> {dst}"),
        RegRead { reg, dst } => format!("REG_READ {reg} -> {dst}"),
        RegWrite { reg, src } => format!("REG_WRITE {reg}, {}", fmt_operand(src)),
        StbInsert { stb, key, value, dst } => format!(
            "STB_INSERT {stb}, {}, {}{}",
            fmt_operand(key),
            fmt_operand(value),
            opt(dst)
        ),
        StbDelete { stb, key, dst } => format!("STB_DELETE {stb}, {}{}", fmt_operand(key), opt(dst)),
        StbLookup { stb, key, hit, value } => {
            let v = value.map(|v| format!(", {v}")).unwrap_or_default();
            format!("STB_LOOKUP {stb}, {} -> {hit}{v}", fmt_operand(key))
        }
        Timestamp { dst } => format!("TIMESTAMP -> {dst}"),
        GenPkt { dest, tag, fields, mirror } => {
            let mut s = match dest {
                GenDest::Controller => "GEN_PKT ctrl".to_string(),
                GenDest::Port(p) => format!("GEN_PKT port={p}"),
            };
            let _ = write!(s, ", tag={tag}");
            for f in fields {
                let _ = write!(s, ", {}", fmt_operand(f));
            }
            if *mirror {
                s.push_str(", mirror");
            }
            s
        }
        SampleTest { sampler, n, dst } => format!("SAMPLE_TEST {sampler}, {n} -> {dst}"),
        Output { port } => format!("OUTPUT {}", fmt_operand(port)),
        GotoTable { table } => format!("GOTO_TABLE {table}"),
    }
}

pub fn disassemble(block: &ActionBlock) -> String {
    let mut s = String::new();
    for ins in &block.instructions {
        s.push_str(&fmt_instruction(ins));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::{encode_block, decode_block};

    const THRESHOLD: &str = "
        CNTR_ADD c0, #1 -> meta:1024:64   ; post-value into scratch
        BRANCH_NE meta:1024:64, #100, +3
        GEN_PKT ctrl, tag=1, meta:1024:64, pktlen
        CNTR_SET c0, #0
    ";

    #[test]
    fn assemble_threshold_block() {
        let b = assemble(THRESHOLD).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.declared.len(), 1);
        assert_eq!(
            b.instructions[1],
            Instruction::Branch {
                cond: Cond::Ne,
                lhs: Operand::Field(FieldRef::meta(1024, 64)),
                rhs: Operand::Imm(100),
                offset: 3
            }
        );
        let text = disassemble(&b);
        assert_eq!(assemble(&text).unwrap(), b);
    }

    #[test]
    fn every_mnemonic_round_trips() {
        let src = "
            NOP
            SET_FIELD meta:0:8, #0x10
            MOVE meta:8:8, pkt:0:8
            ADD #1, #-1 -> meta:16:64
            SHR pkt:0:32, #4 -> meta:16:64
            BRANCH_GE pktlen, #64, +1
            STB_INSERT t2, pkt:208:96, #0 -> meta:0:1
            STB_DELETE t2, pkt:208:96
            STB_LOOKUP t2, pkt:208:96 -> meta:0:1, meta:64:64
            REG_READ r3 -> meta:64:64
            REG_WRITE r3, #5
            METER_CHECK m1 -> meta:0:2
            TIMESTAMP -> meta:128:64
            SAMPLE_TEST s0, 100 -> meta:0:1
            GEN_PKT port=3, tag=2, #7, mirror
            OUTPUT #2
            GOTO_TABLE 4
            DROP
            HALT
        ";
        let b = assemble(src).unwrap();
        assert_eq!(b.len(), 19);
        let again = assemble(&disassemble(&b)).unwrap();
        assert_eq!(again, b);
        assert_eq!(decode_block(&encode_block(&b).unwrap()).unwrap(), b);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = assemble("NOP\nFROB x").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(assemble("CNTR_ADD x0, #1").is_err());
        assert!(assemble("BRANCH_EQ #1, #1").is_err());
        assert!(assemble("GEN_PKT ctrl").is_err());
    }
}
