//! Identifier newtypes shared across the device model.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident, $inner:ty, $prefix:literal) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(CounterId, u32, "c");
id_type!(MeterId, u32, "m");
id_type!(RegisterId, u32, "r");
id_type!(
    /// A state table in the shared pool.
    StbId,
    u32,
    "t"
);
id_type!(SamplerId, u32, "s");
id_type!(TimerId, u32, "timer");
id_type!(
    /// Index into the action-ID table.
    SlotId,
    u32,
    "slot"
);
id_type!(
    /// A loaded action block in the action store.
    BlockId,
    u32,
    "block"
);
id_type!(EntryId, u32, "e");
id_type!(ProbeId, u32, "probe");
id_type!(
    /// A subscriber of probe reports.
    AppId,
    u32,
    "app"
);

pub type TableId = u16;
pub type PortId = u16;
pub type DeviceId = u32;

/// A typed reference to a pool resource that action blocks may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceHandle {
    Counter(CounterId),
    Meter(MeterId),
    Register(RegisterId),
    StateTable(StbId),
    Sampler(SamplerId),
}

impl ResourceHandle {
    pub fn class(&self) -> ResourceClass {
        match self {
            ResourceHandle::Counter(_) => ResourceClass::Counter,
            ResourceHandle::Meter(_) => ResourceClass::Meter,
            ResourceHandle::Register(_) => ResourceClass::Register,
            ResourceHandle::StateTable(_) => ResourceClass::StateTable,
            ResourceHandle::Sampler(_) => ResourceClass::Sampler,
        }
    }

    pub fn index(&self) -> u32 {
        match *self {
            ResourceHandle::Counter(c) => c.0,
            ResourceHandle::Meter(m) => m.0,
            ResourceHandle::Register(r) => r.0,
            ResourceHandle::StateTable(t) => t.0,
            ResourceHandle::Sampler(s) => s.0,
        }
    }

    pub fn from_parts(class: ResourceClass, index: u32) -> Option<Self> {
        Some(match class {
            ResourceClass::Counter => ResourceHandle::Counter(CounterId(index)),
            ResourceClass::Meter => ResourceHandle::Meter(MeterId(index)),
            ResourceClass::Register => ResourceHandle::Register(RegisterId(index)),
            ResourceClass::StateTable => ResourceHandle::StateTable(StbId(index)),
            ResourceClass::Sampler => ResourceHandle::Sampler(SamplerId(index)),
            ResourceClass::Timer => return None,
        })
    }
}

impl fmt::Display for ResourceHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResourceHandle::Counter(x) => x.fmt(f),
            ResourceHandle::Meter(x) => x.fmt(f),
            ResourceHandle::Register(x) => x.fmt(f),
            ResourceHandle::StateTable(x) => x.fmt(f),
            ResourceHandle::Sampler(x) => x.fmt(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceClass {
    Counter,
    Meter,
    Register,
    StateTable,
    Timer,
    Sampler,
}

impl ResourceClass {
    pub const ALL: [ResourceClass; 6] = [
        ResourceClass::Counter,
        ResourceClass::Meter,
        ResourceClass::Register,
        ResourceClass::StateTable,
        ResourceClass::Timer,
        ResourceClass::Sampler,
    ];

    pub fn code(self) -> u8 {
        match self {
            ResourceClass::Counter => 0,
            ResourceClass::Meter => 1,
            ResourceClass::Register => 2,
            ResourceClass::StateTable => 3,
            ResourceClass::Timer => 4,
            ResourceClass::Sampler => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}
