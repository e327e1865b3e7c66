pub mod config;
pub mod device;
pub mod error;
pub mod field;
pub mod ids;
pub mod pool;
pub mod probe;
pub mod vm;

pub use device::*;
pub use error::DeviceError;
