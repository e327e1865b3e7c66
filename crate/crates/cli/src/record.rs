//! Output records and their human rendering.

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// One executed command. In `--json` mode each is printed as one line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub line: usize,
    pub command: String,
    pub ok: bool,
    #[serde(default)]
    pub data: Value,
    #[serde(default)]
    pub error: Option<ErrorInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorInfo {
    /// `parse` or `command`.
    pub kind: String,
    /// Device error code, when the failure came from a device.
    pub code: Option<u16>,
    pub message: String,
    #[serde(default)]
    pub hint: Option<String>,
}

/// A u128 as a JSON number when it fits in 64 bits, otherwise as a hex
/// string.
pub fn wide(v: u128) -> Value {
    match u64::try_from(v) {
        Ok(x) => Value::from(x),
        Err(_) => Value::from(format!("{v:#x}")),
    }
}

pub fn wide_vec(v: &[u128]) -> Value {
    Value::Array(v.iter().map(|x| wide(*x)).collect())
}

/// Left-aligned columns separated by two spaces.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let s: Vec<String> = cells.iter().enumerate().map(|(i, c)| format!("{c:<0$}", w[i])).collect();
        s.join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out.push('\n');
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wide_values() {
        assert_eq!(wide(7), Value::from(7u64));
        assert_eq!(wide(1 << 70), Value::from("0x400000000000000000"));
    }

    #[test]
    fn aligned_table() {
        let t = table(&["id", "name"], &[vec!["1".into(), "a".into()], vec!["22".into(), "bb".into()]]);
        assert_eq!(t, "id  name\n1   a\n22  bb");
    }
}
