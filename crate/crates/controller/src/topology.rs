use std::collections::BTreeSet;

use dnp_core::ids::{DeviceId, PortId};
use serde::{Deserialize, Serialize};

use crate::ControllerError;

/// A device port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub device: DeviceId,
    pub port: PortId,
}

impl Endpoint {
    pub fn new(device: DeviceId, port: PortId) -> Self {
        Endpoint { device, port }
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "d{}.p{}", self.device, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoDevice {
    pub id: DeviceId,
    pub ports: Vec<PortId>,
}

/// A bidirectional link with a fixed one-way latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub a: Endpoint,
    pub b: Endpoint,
    #[serde(default)]
    pub latency_ns: u64,
    /// Bits per second; 0 is unlimited.
    #[serde(default)]
    pub capacity_bps: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    #[serde(default, rename = "device")]
    pub devices: Vec<TopoDevice>,
    #[serde(default, rename = "link")]
    pub links: Vec<Link>,
}

impl Topology {
    /// Checks that device ids are unique, link ports exist, and no port
    /// carries two links.
    pub fn validate(&self) -> Result<(), ControllerError> {
        let mut ids = BTreeSet::new();
        for d in &self.devices {
            if !ids.insert(d.id) {
                return Err(ControllerError::InvalidTopology(format!("duplicate device {}", d.id)));
            }
        }
        let mut used = BTreeSet::new();
        for l in &self.links {
            for e in [l.a, l.b] {
                if !self.has_port(e) {
                    return Err(ControllerError::InvalidTopology(format!("link references missing port {e}")));
                }
                if !used.insert(e) {
                    return Err(ControllerError::InvalidTopology(format!("port {e} carries two links")));
                }
            }
        }
        Ok(())
    }

    pub fn device(&self, id: DeviceId) -> Option<&TopoDevice> {
        self.devices.iter().find(|d| d.id == id)
    }

    pub fn has_port(&self, e: Endpoint) -> bool {
        self.device(e.device).is_some_and(|d| d.ports.contains(&e.port))
    }

    /// The far end of the link attached at `e`, with its latency.
    pub fn peer(&self, e: Endpoint) -> Option<(Endpoint, u64)> {
        self.links.iter().find_map(|l| {
            if l.a == e {
                Some((l.b, l.latency_ns))
            } else if l.b == e {
                Some((l.a, l.latency_ns))
            } else {
                None
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo() -> Topology {
        Topology {
            devices: vec![TopoDevice { id: 1, ports: vec![1, 2] }, TopoDevice { id: 2, ports: vec![1] }],
            links: vec![Link { a: Endpoint::new(1, 2), b: Endpoint::new(2, 1), latency_ns: 5, capacity_bps: 0 }],
        }
    }

    #[test]
    fn peers_are_symmetric() {
        let t = topo();
        t.validate().unwrap();
        assert_eq!(t.peer(Endpoint::new(2, 1)), Some((Endpoint::new(1, 2), 5)));
        assert_eq!(t.peer(Endpoint::new(1, 1)), None);
    }

    #[test]
    fn rejects_dangling_link() {
        let mut t = topo();
        t.links[0].b.port = 9;
        assert!(t.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let t = topo();
        let s = toml::to_string(&t).unwrap();
        assert_eq!(toml::from_str::<Topology>(&s).unwrap(), t);
    }
}
