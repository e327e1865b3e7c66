use dnp_core::ids::{DeviceId, ProbeId};
use serde::{Deserialize, Serialize};

use crate::query::QueryId;

/// One collected observation. `fields` are the raw report or poll fields;
/// `value` is the post-processed result, if the reduction yields one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub ts: u64,
    pub device: DeviceId,
    pub probe: ProbeId,
    pub fields: Vec<u128>,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub query: QueryId,
    pub rows: Vec<Row>,
    /// Set once a one-shot query has its final row.
    pub complete: bool,
}

/// A row tagged with its query, as written by [`ResultSet::to_jsonl`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowRecord {
    pub query: QueryId,
    pub ts: u64,
    pub device: DeviceId,
    pub probe: ProbeId,
    pub fields: Vec<u128>,
    pub value: Option<f64>,
}

impl RowRecord {
    pub fn row(self) -> Row {
        Row { ts: self.ts, device: self.device, probe: self.probe, fields: self.fields, value: self.value }
    }
}

impl ResultSet {
    pub fn new(query: QueryId) -> Self {
        ResultSet { query, rows: Vec::new(), complete: false }
    }

    /// One JSON record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let rec = RowRecord {
                query: self.query,
                ts: row.ts,
                device: row.device,
                probe: row.probe,
                fields: row.fields.clone(),
                value: row.value,
            };
            out.push_str(&serde_json::to_string(&rec).expect("rows serialize"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(s: &str) -> Result<Vec<RowRecord>, serde_json::Error> {
        s.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
    }
}
