use std::fmt::Write;

use crate::msg::{decode, peek_header, HEADER_LEN};

/// Renders a frame for debugging: a decoded header line, the decoded message
/// (or the decode error), then the raw bytes 16 per row.
pub fn hexdump(frame: &[u8]) -> String {
    let mut out = String::new();
    match peek_header(frame) {
        Ok(h) => {
            let _ = writeln!(
                out,
                "header: version={} type={:#04x} xid={} body_len={}",
                h.version, h.msg_type, h.xid, h.body_len
            );
        }
        Err(e) => {
            let _ = writeln!(out, "header: {e}");
        }
    }
    match decode(frame) {
        Ok(f) => {
            let _ = writeln!(out, "message: {:?}", f.msg);
        }
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
        }
    }
    for (i, row) in frame.chunks(16).enumerate() {
        let _ = write!(out, "{:08x} ", i * 16);
        for (j, b) in row.iter().enumerate() {
            let sep = if i == 0 && j == HEADER_LEN { '|' } else { ' ' };
            let _ = write!(out, "{sep}{b:02x}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msg::{encode, Message};

    #[test]
    fn marks_header_boundary() {
        let s = hexdump(&encode(3, &Message::DeleteTable { table: 1 }));
        assert!(s.starts_with("header: version=1 type=0x21 xid=3 body_len=2\n"));
        assert!(s.contains("00000000  01 21 03 00 00 00 02 00 00 00|01 00\n"));
    }
}
