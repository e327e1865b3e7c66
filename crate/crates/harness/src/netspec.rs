//! Network description files: devices, their pipelines, and links.
//!
//! ```toml
//! [[device]]
//! id = 1
//! ports = [1, 2]
//! pipeline = "three_table.toml"   # optional, relative to this file
//!
//! [[link]]
//! a = { device = 1, port = 2 }
//! b = { device = 2, port = 1 }
//! latency_ns = 1000
//! ```
//!
//! Devices without a pipeline get [`route_pipeline`].

use std::path::{Path, PathBuf};

use dnp_controller::{Endpoint, Link, TopoDevice, Topology};
use dnp_core::config::{ActionDef, EntryConfig, PipelineConfig, TableConfig};
use dnp_core::field::FieldRef;
use dnp_core::ids::{DeviceId, PortId};
use dnp_core::vm::DeviceCaps;
use dnp_core::{Device, DeviceConfig, MatchKey};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: DeviceId,
    pub ports: Vec<PortId>,
    #[serde(default)]
    pub pipeline: Option<PathBuf>,
    #[serde(default)]
    pub caps: Option<DeviceCaps>,
    #[serde(default)]
    pub queue_capacity: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    #[serde(rename = "device")]
    pub devices: Vec<DeviceSpec>,
    #[serde(default, rename = "link")]
    pub links: Vec<Link>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl NetSpec {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, HarnessError> {
        let mut s: NetSpec = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        s.base_dir = base_dir.into();
        s.topology().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// `n` devices in a chain, each with ports 1 and 2; port 2 of device i
    /// links to port 1 of device i+1.
    pub fn line(n: u32, latency_ns: u64) -> Self {
        NetSpec {
            devices: (1..=n)
                .map(|id| DeviceSpec { id, ports: vec![1, 2], pipeline: None, caps: None, queue_capacity: None })
                .collect(),
            links: (1..n)
                .map(|i| Link { a: Endpoint::new(i, 2), b: Endpoint::new(i + 1, 1), latency_ns, capacity_bps: 0 })
                .collect(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn topology(&self) -> Topology {
        Topology {
            devices: self.devices.iter().map(|d| TopoDevice { id: d.id, ports: d.ports.clone() }).collect(),
            links: self.links.clone(),
        }
    }

    pub fn pipeline(&self, d: &DeviceSpec) -> Result<PipelineConfig, HarnessError> {
        let mut cfg = match &d.pipeline {
            None => route_pipeline(d.id, &d.ports),
            Some(p) => {
                let path = self.base_dir.join(p);
                let text =
                    std::fs::read_to_string(&path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
                PipelineConfig::from_toml(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?
            }
        };
        cfg.device.id = d.id;
        let have: Vec<PortId> = cfg.device.ports.iter().map(|p| p.id).collect();
        for p in &d.ports {
            if !have.contains(p) {
                cfg.device.ports.push(dnp_core::PortConfig::new(*p));
            }
        }
        if let Some(c) = d.caps {
            cfg.device.caps = c;
        }
        if let Some(q) = d.queue_capacity {
            for p in &mut cfg.device.ports {
                *p = dnp_core::PortConfig { queue_capacity: q, low_watermark: q / 4, high_watermark: q * 3 / 4, ..*p };
            }
        }
        Ok(cfg)
    }

    pub fn build_devices(&self) -> Result<Vec<Device>, HarnessError> {
        self.devices
            .iter()
            .map(|d| self.pipeline(d)?.build().map_err(|e| HarnessError::Config(format!("device {}: {e}", d.id))))
            .collect()
    }
}

/// One table keyed on packet byte 0: value p outputs on port p, anything
/// else is dropped.
pub fn route_pipeline(id: DeviceId, ports: &[PortId]) -> PipelineConfig {
    let mut actions = vec![ActionDef { name: "drop".into(), code: "DROP".into() }];
    let mut entries = Vec::new();
    for p in ports {
        actions.push(ActionDef { name: format!("out{p}"), code: format!("OUTPUT #{p}") });
        entries.push(EntryConfig {
            priority: 1,
            key: MatchKey::exact(*p as u128, 8),
            action: format!("out{p}"),
            params: String::new(),
        });
    }
    PipelineConfig {
        device: DeviceConfig::new(id, ports.iter().copied()),
        resources: vec![],
        actions,
        tables: vec![TableConfig {
            id: 0,
            key: vec![FieldRef::pkt(0, 8)],
            max_entries: 4096,
            miss: Some("drop".into()),
            position: None,
            entries,
        }],
        hooks: vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_defaults_pipeline() {
        let text = r#"
            [[device]]
            id = 1
            ports = [1, 2]
            [[device]]
            id = 2
            ports = [1, 2]
            queue_capacity = 8
            [[link]]
            a = { device = 1, port = 2 }
            b = { device = 2, port = 1 }
            latency_ns = 1000
        "#;
        let s = NetSpec::from_toml(text, ".").unwrap();
        assert_eq!(s.topology().peer(Endpoint::new(2, 1)), Some((Endpoint::new(1, 2), 1000)));
        let devs = s.build_devices().unwrap();
        let mut d = devs[0].clone();
        let mut pkt = vec![0u8; 64];
        pkt[0] = 2;
        assert_eq!(d.process_packet(1, pkt, 0).verdict, dnp_core::Verdict::Forward(2));
        assert_eq!(devs[1].port_config(1).unwrap().queue_capacity, 8);
    }

    #[test]
    fn rejects_dangling_link() {
        let text = "[[device]]\nid = 1\nports = [1]\n[[link]]\na = { device = 1, port = 1 }\nb = { device = 9, port = 1 }\n";
        assert!(matches!(NetSpec::from_toml(text, "."), Err(HarnessError::Config(_))));
    }
}
