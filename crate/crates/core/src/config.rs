//! Pipeline configuration documents.
//!
//! A configuration lists the device parameters, pool resources, named action
//! blocks in assembly text, tables with their entries, and port hooks:
//!
//! ```toml
//! [device]
//! id = 1
//! ports = [{ id = 1 }, { id = 2 }]
//!
//! [[resources]]
//! class = "counter"
//! unit = "packets"
//! index = 0
//!
//! [[actions]]
//! name = "fwd2"
//! code = "CNTR_ADD c0, #1\nOUTPUT #2"
//!
//! [[tables]]
//! id = 0
//! key = ["pkt:0:8"]
//! miss = "fwd2"
//!
//! [[tables.entries]]
//! priority = 10
//! key = { value = "0x0a", mask = "0xff" }
//! action = "fwd2"
//! ```
//!
//! Tables are created in document order. A table without `position` is
//! appended to the fall-through chain. Timers are not part of the document.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::device::*;
use crate::error::DeviceError;
use crate::field::FieldRef;
use crate::ids::*;
use crate::pool::{AllocRequest, CounterUnit};
use crate::vm::{assemble, disassemble};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub device: DeviceConfig,
    #[serde(default)]
    pub resources: Vec<ResourceDef>,
    #[serde(default)]
    pub actions: Vec<ActionDef>,
    #[serde(default)]
    pub tables: Vec<TableConfig>,
    #[serde(default)]
    pub hooks: Vec<HookConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceDef {
    pub index: u32,
    #[serde(flatten)]
    pub req: AllocRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionDef {
    pub name: String,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableConfig {
    pub id: TableId,
    pub key: Vec<FieldRef>,
    #[serde(default = "default_max_entries")]
    pub max_entries: u32,
    #[serde(default)]
    pub miss: Option<String>,
    #[serde(default)]
    pub position: Option<Position>,
    #[serde(default)]
    pub entries: Vec<EntryConfig>,
}

fn default_max_entries() -> u32 {
    4096
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryConfig {
    pub priority: u32,
    pub key: MatchKey,
    pub action: String,
    /// Hex-encoded parameter bytes.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub params: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookConfig {
    pub port: PortId,
    pub kind: HookKind,
    pub action: String,
}

fn cfg_err(msg: impl Into<String>) -> DeviceError {
    DeviceError::Config(msg.into())
}

fn decode_hex(s: &str) -> Result<Vec<u8>, DeviceError> {
    let s = s.strip_prefix("0x").unwrap_or(s);
    if !s.len().is_multiple_of(2) {
        return Err(cfg_err(format!("odd-length hex `{s}`")));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| cfg_err(format!("bad hex `{s}`"))))
        .collect()
}

fn encode_hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

/// Name the dump uses for the action in `slot`.
fn slot_name(slot: SlotId) -> String {
    if slot == DEFAULT_MISS_SLOT {
        "default_miss".into()
    } else {
        format!("a{}", slot.0)
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, DeviceError> {
        toml::from_str(text).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Builds a device from the document.
    pub fn build(&self) -> Result<Device, DeviceError> {
        let mut d = Device::new(self.device.clone());
        self.alloc_resources(&mut d)?;
        let mut slots: BTreeMap<&str, SlotId> = BTreeMap::new();
        slots.insert("default_miss", DEFAULT_MISS_SLOT);
        for a in &self.actions {
            let block = assemble(&a.code).map_err(|e| cfg_err(format!("action `{}`: {e}", a.name)))?;
            let (s, _) = d.load_action(block)?;
            if slots.insert(&a.name, s).is_some() {
                return Err(cfg_err(format!("duplicate action `{}`", a.name)));
            }
        }
        let slot = |name: &str| slots.get(name).copied().ok_or_else(|| cfg_err(format!("unknown action `{name}`")));
        for t in &self.tables {
            let def = TableDef {
                id: t.id,
                key: t.key.clone(),
                max_entries: t.max_entries,
                miss: t.miss.as_deref().map(slot).transpose()?,
                writable_by_actions: false,
            };
            d.create_table(def, t.position.unwrap_or(Position::End))?;
            for e in &t.entries {
                let spec = EntrySpec { priority: e.priority, key: e.key, action: slot(&e.action)?, params: decode_hex(&e.params)? };
                d.insert_entry(t.id, spec)?;
            }
        }
        for h in &self.hooks {
            d.set_hook(h.port, h.kind, Some(slot(&h.action)?))?;
        }
        Ok(d)
    }

    /// Allocates every listed resource at its index. Gaps are filled with
    /// placeholders that are released afterwards.
    fn alloc_resources(&self, d: &mut Device) -> Result<(), DeviceError> {
        let mut by_class: BTreeMap<ResourceClass, BTreeMap<u32, AllocRequest>> = BTreeMap::new();
        for r in &self.resources {
            if by_class.entry(r.req.class()).or_default().insert(r.index, r.req).is_some() {
                return Err(cfg_err(format!("resource index {} listed twice", r.index)));
            }
        }
        for (class, wanted) in by_class {
            let max = *wanted.keys().last().expect("non-empty");
            let mut placeholders = Vec::new();
            for i in 0..=max {
                let req = wanted.get(&i).copied().unwrap_or(match class {
                    ResourceClass::StateTable => AllocRequest::StateTable { key_width: 1, capacity: 1 },
                    _ => placeholder(class),
                });
                let h = d.alloc(req)?;
                debug_assert_eq!(h.index(), i);
                if !wanted.contains_key(&i) {
                    placeholders.push(h);
                }
            }
            for h in placeholders {
                d.release(h)?;
            }
        }
        Ok(())
    }
}

fn placeholder(class: ResourceClass) -> AllocRequest {
    match class {
        ResourceClass::Counter => AllocRequest::Counter { unit: CounterUnit::Packets },
        ResourceClass::Meter => AllocRequest::Meter { config: crate::pool::MeterConfig { cir: 0, cbs: 0, pir: 0, pbs: 0 } },
        ResourceClass::Sampler => AllocRequest::Sampler,
        _ => AllocRequest::Register,
    }
}

impl Device {
    /// Dumps the installed pipeline, including any probe code currently
    /// spliced into actions, as a configuration document.
    pub fn dump_config(&self) -> PipelineConfig {
        let mut resources = Vec::new();
        for (class, idxs) in self.pool.allocated_handles() {
            for i in idxs {
                let Some(h) = ResourceHandle::from_parts(class, i) else { continue };
                let req = match h {
                    ResourceHandle::Counter(c) => AllocRequest::Counter { unit: self.pool.counter(c).expect("live").unit },
                    ResourceHandle::Meter(m) => AllocRequest::Meter { config: self.pool.meter(m).expect("live").config },
                    ResourceHandle::Register(_) => AllocRequest::Register,
                    ResourceHandle::StateTable(t) => {
                        let st = self.pool.state_table(t).expect("live");
                        AllocRequest::StateTable { key_width: st.key_width, capacity: st.capacity }
                    }
                    ResourceHandle::Sampler(_) => AllocRequest::Sampler,
                };
                resources.push(ResourceDef { index: i, req });
            }
        }
        let actions = self
            .slots
            .iter()
            .filter(|(s, _)| **s != DEFAULT_MISS_SLOT)
            .map(|(s, slot)| ActionDef { name: slot_name(*s), code: disassemble(&self.blocks[&slot.block].block) })
            .collect();

        // Fall-through tables first, in traversal order, then tables that
        // were spliced onto an edge once both ends exist.
        let mut order = Vec::new();
        let mut cur = self.entry_table;
        while let Some(t) = cur {
            if order.contains(&t) {
                break;
            }
            if self.tables[&t].position == Position::End {
                order.push(t);
            }
            cur = self.tables[&t].next;
        }
        let mut pending: Vec<TableId> = self.tables.keys().copied().filter(|t| !order.contains(t)).collect();
        while !pending.is_empty() {
            let before = pending.len();
            pending.retain(|t| match self.tables[t].position {
                Position::Edge { from, to } if order.contains(&from) && order.contains(&to) => {
                    order.push(*t);
                    false
                }
                Position::End => {
                    order.push(*t);
                    false
                }
                _ => true,
            });
            if pending.len() == before {
                order.append(&mut pending);
            }
        }
        let tables = order
            .iter()
            .map(|id| {
                let t = &self.tables[id];
                TableConfig {
                    id: *id,
                    key: t.def.key.clone(),
                    max_entries: t.def.max_entries,
                    miss: (t.miss != DEFAULT_MISS_SLOT).then(|| slot_name(t.miss)),
                    position: match t.position {
                        Position::End => None,
                        p => Some(p),
                    },
                    entries: t
                        .entries
                        .iter()
                        .map(|e| EntryConfig {
                            priority: e.priority,
                            key: e.key,
                            action: slot_name(e.action),
                            params: encode_hex(&e.params),
                        })
                        .collect(),
                }
            })
            .collect();
        let hooks = self
            .ports
            .iter()
            .flat_map(|(p, port)| {
                HookKind::ALL
                    .iter()
                    .zip(port.hooks)
                    .filter_map(move |(k, s)| s.map(|s| HookConfig { port: *p, kind: *k, action: slot_name(s) }))
            })
            .collect();
        PipelineConfig { device: self.cfg.clone(), resources, actions, tables, hooks }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"
[device]
id = 7
ports = [{ id = 1 }, { id = 2 }]

[[resources]]
class = "counter"
unit = "bytes"
index = 2

[[actions]]
name = "fwd2"
code = "CNTR_ADD c2, pktlen\nOUTPUT #2"

[[actions]]
name = "to1"
code = "OUTPUT #1"

[[tables]]
id = 0
key = ["pkt:0:8"]
miss = "to1"

[[tables.entries]]
priority = 10
key = { value = "0x0a", mask = "0xff" }
action = "fwd2"
params = "00ff"
"#;

    #[test]
    fn load_and_forward() {
        let cfg = PipelineConfig::from_toml(DOC).unwrap();
        let mut d = cfg.build().unwrap();
        assert_eq!(d.process_packet(1, vec![0x0a; 64], 0).verdict, Verdict::Forward(2));
        assert_eq!(d.process_packet(2, vec![0x0b; 64], 0).verdict, Verdict::Forward(1));
        assert_eq!(d.read_counter(CounterId(2)).unwrap().0, 64);
        assert_eq!(d.entries(0).unwrap()[0].params, vec![0, 0xff]);
        assert!(d.read_counter(CounterId(0)).is_err());
    }

    #[test]
    fn dump_reload_is_identical() {
        let d = PipelineConfig::from_toml(DOC).unwrap().build().unwrap();
        let text = d.dump_config().to_toml();
        let again = PipelineConfig::from_toml(&text).unwrap().build().unwrap();
        assert_eq!(again.snapshot().to_bytes(), d.snapshot().to_bytes());
    }

    #[test]
    fn unknown_action_is_an_error() {
        let doc = DOC.replace("miss = \"to1\"", "miss = \"nope\"");
        let err = PipelineConfig::from_toml(&doc).unwrap().build().unwrap_err();
        assert!(matches!(err, DeviceError::Config(m) if m.contains("nope")));
    }
}
