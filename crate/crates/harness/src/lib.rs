//! Virtual-time network simulator and experiment drivers.

pub mod baseline;
pub mod bench;
pub mod deploy;
pub mod netspec;
pub mod scenario;
pub mod sim;
pub mod traffic;

pub use baseline::{compare_baseline, diff_emissions, probe_catalog, DiffReport, PortDiff};
pub use bench::{bench_throughput, calibrate, BenchCurve, BenchOpts, BenchPoint};
pub use deploy::{load_pipeline, measure_deploy, teardown, three_table, DeployMeasurement, DeployOpts, DeployPath, Inventory};
pub use netspec::{route_pipeline, DeviceSpec, NetSpec};
pub use scenario::{run_scenario, Action, ActionKind, Script, ScriptError, TrafficSource};
pub use sim::{DropCount, Emission, ExperimentRecord, SimNetwork, TimelineEntry};
pub use traffic::{read_trace, tcp_packet, write_trace, FlowInfo, TracePacket, TrafficProfile};

use dnp_controller::ControllerError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("script: {0}")]
    Script(#[from] ScriptError),
    #[error("seed mismatch: {0} vs {1}")]
    SeedMismatch(u64, u64),
    #[error(transparent)]
    Controller(#[from] ControllerError),
}
