//! Control channel between the controller and data plane devices.
//!
//! Every message travels in a frame with a 10-byte little-endian header:
//!
//! | offset | size | field    |
//! |--------|------|----------|
//! | 0      | 1    | version (1) |
//! | 1      | 1    | msg_type |
//! | 2      | 4    | xid      |
//! | 6      | 4    | body_len |
//!
//! Body layouts per message type are listed on [`Message`]. Primitive
//! encodings: integers little-endian, `bool` one byte 0/1, `opt<T>` a tag byte
//! (0 none, 1 some) then `T`, `bytes`/`str` a u32 length then the data,
//! `vec<T>` a u32 count then the items.

mod agent;
mod hexdump;
mod local;
mod msg;
mod session;
mod wire;

pub use agent::handle;
pub use hexdump::hexdump;
pub use local::{LocalChannel, ReportQueue};
pub use msg::{decode, ProbeSummary, encode, peek_header, Frame, Header, Message, ERR_BAD_FRAME, ERR_UNSUPPORTED, HEADER_LEN, VERSION};
pub use session::{
    error_reply, mem_link, serve, tcp_connect, tcp_link, Channel, Endpoint, FrameRx, FrameTx, Pending, ReportPusher,
    Session, SessionError, LIVE_TIMEOUT,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("frame truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("body does not match its declared length")]
    BadLength,
    #[error("unknown message type {msg_type:#04x} (xid {xid})")]
    UnknownType { msg_type: u8, xid: u32 },
    #[error("malformed body: {0}")]
    BadBody(String),
}
