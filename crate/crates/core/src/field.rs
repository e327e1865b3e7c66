//! Protocol-oblivious field addressing.
//!
//! A [`FieldRef`] names a run of bits inside one of the per-packet address
//! spaces. Bits are numbered MSB-first from the start of the space, which is
//! the natural network byte order for packet headers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Widest field an instruction can address.
pub const MAX_FIELD_BITS: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// The packet bytes.
    Packet,
    /// Per-packet scratch, zeroed when the packet enters the device.
    Metadata,
    /// The parameter block of the matched flow entry (read-only).
    Params,
}

impl Space {
    fn tag(self) -> &'static str {
        match self {
            Space::Packet => "pkt",
            Space::Metadata => "meta",
            Space::Params => "param",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct FieldRef {
    pub space: Space,
    pub offset: u32,
    pub len: u8,
}

impl FieldRef {
    pub const fn new(space: Space, offset: u32, len: u8) -> Self {
        FieldRef { space, offset, len }
    }

    pub const fn pkt(offset: u32, len: u8) -> Self {
        Self::new(Space::Packet, offset, len)
    }

    pub const fn meta(offset: u32, len: u8) -> Self {
        Self::new(Space::Metadata, offset, len)
    }

    pub const fn param(offset: u32, len: u8) -> Self {
        Self::new(Space::Params, offset, len)
    }

    /// One past the last bit covered.
    pub fn end(&self) -> u64 {
        self.offset as u64 + self.len as u64
    }

    pub fn mask(&self) -> u128 {
        width_mask(self.len)
    }
}

pub fn width_mask(bits: u8) -> u128 {
    if bits >= 128 {
        u128::MAX
    } else {
        (1u128 << bits) - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FieldParseError {
    #[error("field reference `{0}` is not of the form space:offset:len")]
    Syntax(String),
    #[error("unknown address space `{0}`")]
    Space(String),
    #[error("field length {0} outside 1..=128")]
    Length(u32),
}

impl fmt::Display for FieldRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.space.tag(), self.offset, self.len)
    }
}

impl FromStr for FieldRef {
    type Err = FieldParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.trim().split(':');
        let (Some(space), Some(off), Some(len), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(FieldParseError::Syntax(s.to_string()));
        };
        let space = match space {
            "pkt" => Space::Packet,
            "meta" => Space::Metadata,
            "param" => Space::Params,
            other => return Err(FieldParseError::Space(other.to_string())),
        };
        let offset: u32 = off
            .parse()
            .map_err(|_| FieldParseError::Syntax(s.to_string()))?;
        let len: u32 = len
            .parse()
            .map_err(|_| FieldParseError::Syntax(s.to_string()))?;
        if len == 0 || len > MAX_FIELD_BITS as u32 {
            return Err(FieldParseError::Length(len));
        }
        Ok(FieldRef::new(space, offset, len as u8))
    }
}

impl TryFrom<String> for FieldRef {
    type Error = FieldParseError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<FieldRef> for String {
    fn from(f: FieldRef) -> String {
        f.to_string()
    }
}

/// Reads `len` bits starting at bit `offset`. Bits past the end of `buf`
/// read as zero.
pub fn read_bits(buf: &[u8], offset: u32, len: u8) -> u128 {
    let mut bit = offset as u64;
    let end = bit + len as u64;
    let mut value: u128 = 0;
    while bit < end {
        let idx = (bit / 8) as usize;
        let in_byte = (bit % 8) as u32;
        let take = (8 - in_byte).min((end - bit) as u32);
        let byte = buf.get(idx).copied().unwrap_or(0) as u32;
        let chunk = (byte >> (8 - in_byte - take)) & ((1u32 << take) - 1);
        value = (value << take) | chunk as u128;
        bit += take as u64;
    }
    value
}

/// Writes the low `len` bits of `value` at bit `offset`. Bits past the end of
/// `buf` are discarded.
pub fn write_bits(buf: &mut [u8], offset: u32, len: u8, value: u128) {
    let mut bit = offset as u64;
    let end = bit + len as u64;
    let value = value & width_mask(len);
    while bit < end {
        let idx = (bit / 8) as usize;
        let in_byte = (bit % 8) as u32;
        let take = (8 - in_byte).min((end - bit) as u32);
        let remaining_after = (end - bit - take as u64) as u32;
        let chunk = ((value >> remaining_after) as u32) & ((1u32 << take) - 1);
        if let Some(b) = buf.get_mut(idx) {
            let shift = 8 - in_byte - take;
            let mask = (((1u32 << take) - 1) << shift) as u8;
            *b = (*b & !mask) | ((chunk << shift) as u8);
        }
        bit += take as u64;
    }
}
