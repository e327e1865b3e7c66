//! Controller and collector: compiles application queries into probe sets,
//! deploys them consistently across devices, and collects results.

mod controller;
pub mod query;
pub mod result;
pub mod topology;

pub use controller::{ControlEvent, Controller, Deployed};
pub use query::{compile, Mode, PlannedProbe, PostProcess, Query, QueryId, QueryKind, QueryPlan};
pub use result::{ResultSet, Row, RowRecord};
pub use topology::{Endpoint, Link, TopoDevice, Topology};

use dnp_core::ids::DeviceId;
use dnp_proto::SessionError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("unresolved selector: {0}")]
    UnresolvedSelector(String),
    #[error("unsupported query kind {0}")]
    UnsupportedKind(String),
    #[error("admission rejected on device {device}: estimate {estimate} pps below floor {floor}")]
    AdmissionRejected { device: DeviceId, estimate: f64, floor: f64 },
    #[error("deploy failed on device {device}: {cause}")]
    DeployFailed { device: DeviceId, cause: String },
    #[error("no such query {0}")]
    NoSuchQuery(u32),
    #[error("query {0} already exists")]
    DuplicateQuery(u32),
    #[error("device {0} is not connected")]
    NotConnected(DeviceId),
    #[error("device {device}: {source}")]
    Session { device: DeviceId, source: SessionError },
    #[error("device {device} sent unexpected {got}")]
    UnexpectedReply { device: DeviceId, got: String },
}

impl ControllerError {
    /// The device error code carried by a remote failure, if any.
    pub fn device_code(&self) -> Option<u16> {
        match self {
            ControllerError::Session { source: SessionError::Remote { code, .. }, .. } => Some(*code),
            _ => None,
        }
    }
}
