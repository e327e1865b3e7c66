use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::*;
use crate::pool::PoolError;
use crate::vm::ValidationError;

/// Every failure a device operation can report. Each variant has a stable
/// numeric code used on the control channel.
#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceError {
    #[error("no such table {0}")]
    NoSuchTable(TableId),
    #[error("table {0} already exists")]
    DuplicateTableId(TableId),
    #[error("invalid position for a new table")]
    InvalidPosition,
    #[error("key is {0} bits wide, limit is 128")]
    KeyTooWide(u32),
    #[error("key width mismatch")]
    KeyWidthMismatch,
    #[error("an entry with this key and priority already exists")]
    DuplicateEntry,
    #[error("no such entry {0}")]
    NoSuchEntry(EntryId),
    #[error("table {0} is full")]
    TableFull(TableId),
    #[error("action slot {0} is not loaded")]
    DanglingActionPtr(SlotId),
    #[error("entry parameters exceed the limit")]
    ParamsTooLong,
    #[error("validation failed: {0}")]
    ValidationFailed(ValidationError),
    #[error("slot {0} is still referenced")]
    SlotInUse(SlotId),
    #[error("no such slot {0}")]
    NoSuchSlot(SlotId),
    #[error("block {0} is not loaded")]
    BlockNotLoaded(BlockId),
    #[error("block {0} is still referenced by a slot")]
    BlockInUse(BlockId),
    #[error("{0} is already in use")]
    IdInUse(String),
    #[error("{0}")]
    Pool(PoolError),
    #[error("handle {0} is declared by a loaded block")]
    HandleInUse(ResourceHandle),
    #[error("no such port {0}")]
    NoSuchPort(PortId),
    #[error("action needs a packet and cannot be linked to a timer")]
    ActionNeedsPacket,
    #[error("object is in use by probe {0}")]
    InUseByProbe(ProbeId),
    #[error("probe kind cannot attach there")]
    IncompatibleAttachPoint,
    #[error("no covering entry or miss action to clone")]
    NoCoveringBehavior,
    #[error("bad probe spec: {0}")]
    BadProbeSpec(String),
    #[error("admission rejected: estimate {estimate:.0} pps below floor {floor:.0} pps")]
    AdmissionRejected { estimate: f64, floor: f64 },
    #[error("commit failed at step {step}: {cause}")]
    CommitFailed { step: usize, cause: Box<DeviceError> },
    #[error("injected fault")]
    InjectedFault,
    #[error("device state changed since the plan was made")]
    StaleRequest,
    #[error("no such probe {0}")]
    NoSuchProbe(ProbeId),
    #[error("probe {0} has subscribers")]
    HasSubscribers(ProbeId),
    #[error("unsupported request")]
    Unsupported,
    #[error("{0}")]
    Config(String),
}

impl From<PoolError> for DeviceError {
    fn from(e: PoolError) -> Self {
        match e {
            PoolError::HandleInUse(h) => DeviceError::HandleInUse(h),
            e => DeviceError::Pool(e),
        }
    }
}

impl From<ValidationError> for DeviceError {
    fn from(e: ValidationError) -> Self {
        DeviceError::ValidationFailed(e)
    }
}

impl DeviceError {
    pub fn code(&self) -> u16 {
        use DeviceError::*;
        match self {
            NoSuchTable(_) => 1,
            DuplicateTableId(_) => 2,
            InvalidPosition => 3,
            KeyTooWide(_) => 4,
            KeyWidthMismatch => 5,
            DuplicateEntry => 6,
            NoSuchEntry(_) => 7,
            TableFull(_) => 8,
            DanglingActionPtr(_) => 9,
            ParamsTooLong => 10,
            ValidationFailed(_) => 11,
            SlotInUse(_) => 12,
            NoSuchSlot(_) => 13,
            BlockNotLoaded(_) => 14,
            BlockInUse(_) => 15,
            IdInUse(_) => 16,
            Pool(PoolError::PoolExhausted(_)) => 17,
            Pool(PoolError::NoSuchHandle(_)) => 18,
            Pool(PoolError::NoSuchTimer(_)) => 19,
            Pool(_) => 20,
            HandleInUse(_) => 21,
            NoSuchPort(_) => 22,
            ActionNeedsPacket => 23,
            InUseByProbe(_) => 24,
            IncompatibleAttachPoint => 30,
            NoCoveringBehavior => 31,
            BadProbeSpec(_) => 32,
            AdmissionRejected { .. } => 33,
            CommitFailed { .. } => 34,
            InjectedFault => 35,
            StaleRequest => 36,
            NoSuchProbe(_) => 37,
            HasSubscribers(_) => 38,
            Unsupported => 40,
            Config(_) => 41,
        }
    }
}
