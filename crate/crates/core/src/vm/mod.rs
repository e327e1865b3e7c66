//! The primitive instruction set that action blocks are built from.
//!
//! Blocks are straight-line programs with forward-only branches, so every
//! validated block terminates within `instructions.len()` steps. All stateful
//! effects go through typed pool handles.

mod asm;
mod encode;
mod exec;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldRef, Space};
use crate::ids::*;

pub use asm::{assemble, disassemble, AsmError};
pub use encode::{decode_block, encode_block, DecodeError};
pub use exec::{
    execute, is_probe_packet, probe_packet, Disposition, ExecContext, ExecError, ExecOutcome,
    ReportDraft, PROBE_ETHERTYPE, PROBE_FIELDS_BIT,
};

/// Longest block the device accepts.
pub const MAX_BLOCK_LEN: usize = 64;
/// Metadata scratch size in bytes.
pub const META_BYTES: usize = 256;
/// Largest entry parameter block in bytes.
pub const MAX_PARAM_BYTES: usize = 64;
/// Most operands a single GEN_PKT may carry.
pub const MAX_REPORT_FIELDS: usize = 16;

/// Metadata layout conventions used by the device and the probe compiler.
pub mod meta {
    use crate::field::FieldRef;

    /// Ingress port, written by the device before the first stage.
    pub const IN_PORT: FieldRef = FieldRef::meta(0, 16);
    /// Queue depth after the event, in queue-hook contexts.
    pub const QUEUE_DEPTH: FieldRef = FieldRef::meta(0, 32);
    /// 1 for enqueue, 2 for dequeue, in queue-hook contexts.
    pub const QUEUE_EVENT: FieldRef = FieldRef::meta(32, 8);
    /// First bit of the region reserved for probe fragments.
    pub const PROBE_SCRATCH: u32 = 1024;

    /// The `n`th 64-bit probe scratch word.
    pub const fn scratch(n: u32) -> FieldRef {
        FieldRef::meta(PROBE_SCRATCH + 64 * n, 64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    Imm(u64),
    Field(FieldRef),
    /// Length of the current packet in bytes.
    PktLen,
}

impl From<FieldRef> for Operand {
    fn from(f: FieldRef) -> Self {
        Operand::Field(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Or,
    Shl,
    Shr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Eq,
    Ne,
    Ge,
    Lt,
}

impl Cond {
    pub fn holds(self, a: u128, b: u128) -> bool {
        match self {
            Cond::Eq => a == b,
            Cond::Ne => a != b,
            Cond::Ge => a >= b,
            Cond::Lt => a < b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GenDest {
    /// A report to the controller logical port.
    Controller,
    /// A marked probe packet injected at the egress queue of a port.
    Port(PortId),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Instruction {
    SetField { dst: FieldRef, imm: u64 },
    Move { dst: FieldRef, src: FieldRef },
    Alu { op: AluOp, dst: FieldRef, lhs: Operand, rhs: Operand },
    Branch { cond: Cond, lhs: Operand, rhs: Operand, offset: i16 },
    /// Adds `delta` (read as a signed 64-bit value, saturating at zero) and
    /// optionally deposits the post-value into `dst`.
    CntrAdd { counter: CounterId, delta: Operand, dst: Option<FieldRef> },
    CntrSet { counter: CounterId, value: Operand },
    /// Two-rate three-color check; writes 0 green, 1 yellow, 2 red.
    MeterCheck { meter: MeterId, dst: FieldRef },
    RegRead { reg: RegisterId, dst: FieldRef },
    RegWrite { reg: RegisterId, src: Operand },
    /// `dst` receives 1 when the key was new, 0 on overwrite or full table.
    StbInsert { stb: StbId, key: Operand, value: Operand, dst: Option<FieldRef> },
    /// `dst` receives 1 when an entry was removed.
    StbDelete { stb: StbId, key: Operand, dst: Option<FieldRef> },
    StbLookup { stb: StbId, key: Operand, hit: FieldRef, value: Option<FieldRef> },
    Timestamp { dst: FieldRef },
    GenPkt { dest: GenDest, tag: u32, fields: Vec<Operand>, mirror: bool },
    /// Deterministic 1-in-`n`: fires on the 1st, n+1st, ... execution.
    SampleTest { sampler: SamplerId, n: u32, dst: FieldRef },
    Output { port: Operand },
    GotoTable { table: TableId },
    Drop,
    Nop,
    Halt,
}

impl Instruction {
    /// Whether this instruction ends the packet's traversal of the block.
    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            Instruction::Output { .. }
                | Instruction::GotoTable { .. }
                | Instruction::Drop
                | Instruction::Halt
        )
    }

    pub fn is_mem_access(&self) -> bool {
        matches!(
            self,
            Instruction::CntrAdd { .. }
                | Instruction::CntrSet { .. }
                | Instruction::MeterCheck { .. }
                | Instruction::RegRead { .. }
                | Instruction::RegWrite { .. }
                | Instruction::StbInsert { .. }
                | Instruction::StbDelete { .. }
                | Instruction::StbLookup { .. }
        )
    }

    pub fn resource(&self) -> Option<ResourceHandle> {
        use Instruction::*;
        Some(match *self {
            CntrAdd { counter, .. } | CntrSet { counter, .. } => ResourceHandle::Counter(counter),
            MeterCheck { meter, .. } => ResourceHandle::Meter(meter),
            RegRead { reg, .. } | RegWrite { reg, .. } => ResourceHandle::Register(reg),
            StbInsert { stb, .. } | StbDelete { stb, .. } | StbLookup { stb, .. } => {
                ResourceHandle::StateTable(stb)
            }
            SampleTest { sampler, .. } => ResourceHandle::Sampler(sampler),
            _ => return None,
        })
    }

    /// Fields written by this instruction.
    pub fn writes(&self) -> Vec<FieldRef> {
        use Instruction::*;
        match self {
            SetField { dst, .. } | Move { dst, .. } | Alu { dst, .. } => vec![*dst],
            MeterCheck { dst, .. } | RegRead { dst, .. } | Timestamp { dst } => vec![*dst],
            SampleTest { dst, .. } => vec![*dst],
            CntrAdd { dst, .. } | StbInsert { dst, .. } | StbDelete { dst, .. } => {
                dst.iter().copied().collect()
            }
            StbLookup { hit, value, .. } => std::iter::once(*hit).chain(*value).collect(),
            _ => Vec::new(),
        }
    }

    /// Operands read by this instruction.
    pub fn reads(&self) -> Vec<Operand> {
        use Instruction::*;
        match self {
            Move { src, .. } => vec![Operand::Field(*src)],
            Alu { lhs, rhs, .. } | Branch { lhs, rhs, .. } => vec![*lhs, *rhs],
            CntrAdd { delta, .. } => vec![*delta],
            CntrSet { value, .. } => vec![*value],
            RegWrite { src, .. } => vec![*src],
            StbInsert { key, value, .. } => vec![*key, *value],
            StbDelete { key, .. } | StbLookup { key, .. } => vec![*key],
            GenPkt { fields, .. } => fields.clone(),
            Output { port } => vec![*port],
            _ => Vec::new(),
        }
    }
}

/// A bounded, dynamically loadable instruction sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionBlock {
    pub instructions: Vec<Instruction>,
    pub declared: BTreeSet<ResourceHandle>,
}

impl ActionBlock {
    /// Builds a block whose declared resources are exactly those referenced.
    pub fn new(instructions: Vec<Instruction>) -> Self {
        let declared = instructions.iter().filter_map(|i| i.resource()).collect();
        ActionBlock {
            instructions,
            declared,
        }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// True if the block cannot run without a packet (timer contexts).
    pub fn needs_packet(&self) -> bool {
        self.instructions.iter().any(|i| {
            let field_in_pkt = i.writes().iter().any(|f| f.space == Space::Packet)
                || i.reads().iter().any(|o| match o {
                    Operand::Field(f) => f.space == Space::Packet,
                    Operand::PktLen => true,
                    Operand::Imm(_) => false,
                });
            field_in_pkt
                || matches!(
                    i,
                    Instruction::MeterCheck { .. }
                        | Instruction::Output { .. }
                        | Instruction::GotoTable { .. }
                        | Instruction::GenPkt { mirror: true, .. }
                )
        })
    }
}

/// Static cost of a block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CostProfile {
    pub instr_count: u32,
    pub mem_accesses: u32,
    pub gen_pkt_count_max: u32,
}

impl CostProfile {
    pub fn of(block: &ActionBlock) -> Self {
        Self::of_instructions(&block.instructions)
    }

    pub fn of_instructions(instrs: &[Instruction]) -> Self {
        CostProfile {
            instr_count: instrs.len() as u32,
            mem_accesses: instrs.iter().filter(|i| i.is_mem_access()).count() as u32,
            gen_pkt_count_max: instrs
                .iter()
                .filter(|i| matches!(i, Instruction::GenPkt { .. }))
                .count() as u32,
        }
    }
}

impl std::ops::Add for CostProfile {
    type Output = CostProfile;
    fn add(self, o: CostProfile) -> CostProfile {
        CostProfile {
            instr_count: self.instr_count + o.instr_count,
            mem_accesses: self.mem_accesses + o.mem_accesses,
            gen_pkt_count_max: self.gen_pkt_count_max + o.gen_pkt_count_max,
        }
    }
}

impl std::iter::Sum for CostProfile {
    fn sum<I: Iterator<Item = CostProfile>>(iter: I) -> Self {
        iter.fold(CostProfile::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    /// Probes and actions may not write packet bytes.
    #[default]
    Passive,
    /// Packet writes allowed. Only used for negative-control experiments.
    Permissive,
}

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub mtu: usize,
    pub mode: ExecMode,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            mtu: 2048,
            mode: ExecMode::Passive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ValidationError {
    #[error("block has {0} instructions, limit is {MAX_BLOCK_LEN}")]
    BlockTooLong(usize),
    #[error("instruction {0}: branch offset must be strictly positive")]
    BackwardBranch(usize),
    #[error("instruction {0}: branch target past end of block")]
    BranchOutOfRange(usize),
    #[error("instruction {0}: resource not declared by the block")]
    UndeclaredResource(usize),
    #[error("declared resource {0} is never referenced")]
    UnusedDeclaration(ResourceHandle),
    #[error("instruction {0}: packet write in passive mode")]
    PacketWriteInPassiveMode(usize),
    #[error("instruction {0}: entry parameters are read-only")]
    ReadOnlyField(usize),
    #[error("instruction {0}: field outside its address space")]
    FieldOutOfBounds(usize),
    #[error("instruction {0}: bad operand")]
    BadOperand(usize),
}

impl ValidationError {
    /// Offending instruction index, if the error is tied to one.
    pub fn index(&self) -> Option<usize> {
        use ValidationError::*;
        match *self {
            BackwardBranch(i) | BranchOutOfRange(i) | UndeclaredResource(i)
            | PacketWriteInPassiveMode(i) | ReadOnlyField(i) | FieldOutOfBounds(i)
            | BadOperand(i) => Some(i),
            BlockTooLong(_) | UnusedDeclaration(_) => None,
        }
    }
}

fn field_in_bounds(f: &FieldRef, limits: &Limits) -> bool {
    let extent = match f.space {
        Space::Packet => limits.mtu * 8,
        Space::Metadata => META_BYTES * 8,
        Space::Params => MAX_PARAM_BYTES * 8,
    } as u64;
    f.len >= 1 && f.len <= 128 && f.end() <= extent
}

/// Validates a block under default limits.
pub fn validate(block: &ActionBlock) -> Result<CostProfile, ValidationError> {
    validate_with(block, &Limits::default())
}

pub fn validate_with(block: &ActionBlock, limits: &Limits) -> Result<CostProfile, ValidationError> {
    let n = block.instructions.len();
    if n > MAX_BLOCK_LEN {
        return Err(ValidationError::BlockTooLong(n));
    }
    let mut referenced = BTreeSet::new();
    for (idx, ins) in block.instructions.iter().enumerate() {
        if let Instruction::Branch { offset, .. } = ins {
            if *offset <= 0 {
                return Err(ValidationError::BackwardBranch(idx));
            }
            if idx + *offset as usize > n {
                return Err(ValidationError::BranchOutOfRange(idx));
            }
        }
        if let Some(r) = ins.resource() {
            if !block.declared.contains(&r) {
                return Err(ValidationError::UndeclaredResource(idx));
            }
            referenced.insert(r);
        }
        for w in ins.writes() {
            if !field_in_bounds(&w, limits) {
                return Err(ValidationError::FieldOutOfBounds(idx));
            }
            match w.space {
                Space::Packet if limits.mode == ExecMode::Passive => {
                    return Err(ValidationError::PacketWriteInPassiveMode(idx))
                }
                Space::Params => return Err(ValidationError::ReadOnlyField(idx)),
                _ => {}
            }
        }
        for r in ins.reads() {
            if let Operand::Field(f) = r {
                if !field_in_bounds(&f, limits) {
                    return Err(ValidationError::FieldOutOfBounds(idx));
                }
            }
        }
        match ins {
            Instruction::GenPkt { fields, .. } if fields.len() > MAX_REPORT_FIELDS => {
                return Err(ValidationError::BadOperand(idx))
            }
            Instruction::SampleTest { n: 0, .. } => return Err(ValidationError::BadOperand(idx)),
            _ => {}
        }
    }
    if let Some(extra) = block.declared.difference(&referenced).next() {
        return Err(ValidationError::UnusedDeclaration(*extra));
    }
    Ok(CostProfile::of(block))
}

/// Device throughput capabilities used by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceCaps {
    /// Forwarding rate with no probe memory traffic.
    pub base_pps: f64,
    /// Memory accesses per second available to probe state.
    pub mem_access_budget: f64,
    /// Admission floor; defaults to 90% of `base_pps`.
    pub throughput_floor: f64,
}

impl DeviceCaps {
    pub fn new(base_pps: f64, mem_access_budget: f64) -> Self {
        DeviceCaps {
            base_pps,
            mem_access_budget,
            throughput_floor: 0.9 * base_pps,
        }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.throughput_floor = floor;
        self
    }
}

impl Default for DeviceCaps {
    fn default() -> Self {
        DeviceCaps::new(10_000_000.0, 425_000_000.0)
    }
}

/// Packets per second the device sustains with `mem_accesses_per_packet`
/// probe memory accesses on every packet.
pub fn estimate_throughput(mem_accesses_per_packet: u64, caps: &DeviceCaps) -> f64 {
    if mem_accesses_per_packet == 0 {
        return caps.base_pps;
    }
    caps.base_pps
        .min(caps.mem_access_budget / mem_accesses_per_packet.max(1) as f64)
}
