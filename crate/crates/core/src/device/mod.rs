//! GPU metric sources.
//!
//! Everything downstream of this module sees only [`DeviceInfo`] and
//! [`InstantReading`]. Two backends implement [`DeviceBackend`]: the NVML
//! library ([`NvmlBackend`]) and a scripted profile ([`SimBackend`]).

mod nvml;
mod sim;

pub use self::nvml::NvmlBackend;
pub use self::sim::{SimBackend, SimProfile, SimSegment};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("GPU backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("unknown device index {index} ({available} device(s) available)")]
    UnknownDevice { index: u32, available: usize },
    #[error("reading device {index} failed: {reason}")]
    ReadFailure { index: u32, reason: String },
    #[error("invalid reading: {0}")]
    InvalidReading(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceInfo {
    pub index: u32,
    pub name: String,
    pub memory_total: u64,
}

impl DeviceInfo {
    pub fn new(
        index: u32,
        name: impl Into<String>,
        memory_total: u64,
    ) -> Result<Self, BackendError> {
        if memory_total == 0 {
            return Err(BackendError::InvalidReading(
                "device memory_total must be positive".into(),
            ));
        }
        Ok(Self {
            index,
            name: name.into(),
            memory_total,
        })
    }
}

/// One consistent set of device counters.
///
/// Fields are private so that only validated readings exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstantReading {
    gpu_utilization: u32,
    memory_used: u64,
    memory_total: u64,
    temperature: i32,
    power_draw: u64,
}

impl InstantReading {
    pub fn new(
        gpu_utilization: u32,
        memory_used: u64,
        memory_total: u64,
        temperature: i32,
        power_draw_mw: u64,
    ) -> Result<Self, BackendError> {
        if gpu_utilization > 100 {
            return Err(BackendError::InvalidReading(format!(
                "gpu utilization {gpu_utilization}% outside [0, 100]"
            )));
        }
        if memory_used > memory_total {
            return Err(BackendError::InvalidReading(format!(
                "memory used {memory_used} exceeds total {memory_total}"
            )));
        }
        Ok(Self {
            gpu_utilization,
            memory_used,
            memory_total,
            temperature,
            power_draw: power_draw_mw,
        })
    }

    /// Percent, 0..=100.
    pub fn gpu_utilization(&self) -> u32 {
        self.gpu_utilization
    }

    /// Bytes.
    pub fn memory_used(&self) -> u64 {
        self.memory_used
    }

    /// Bytes.
    pub fn memory_total(&self) -> u64 {
        self.memory_total
    }

    /// Degrees Celsius.
    pub fn temperature(&self) -> i32 {
        self.temperature
    }

    /// Milliwatts.
    pub fn power_draw(&self) -> u64 {
        self.power_draw
    }
}

/// A source of GPU metrics.
///
/// One handle serves one sampling thread at a time; independent handles may
/// be used concurrently.
pub trait DeviceBackend: Send + Sync {
    fn enumerate_devices(&self) -> Result<Vec<DeviceInfo>, BackendError>;

    fn read_instant(&self, device_index: u32) -> Result<InstantReading, BackendError>;

    /// Short name used in diagnostics.
    fn name(&self) -> &'static str;

    fn device(&self, index: u32) -> Result<DeviceInfo, BackendError> {
        let devices = self.enumerate_devices()?;
        let available = devices.len();
        devices
            .into_iter()
            .find(|d| d.index == index)
            .ok_or(BackendError::UnknownDevice { index, available })
    }
}
