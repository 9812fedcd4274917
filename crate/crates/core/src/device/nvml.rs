use std::sync::OnceLock;

use nvml_wrapper::enum_wrappers::device::TemperatureSensor;
use nvml_wrapper::Nvml;

use super::{BackendError, DeviceBackend, DeviceInfo, InstantReading};

/// Backend over the NVIDIA Management Library.
///
/// The library is loaded and initialized on first use, so constructing this
/// handle on a machine without NVML is fine. NVML is shut down when the
/// handle is dropped.
#[derive(Default)]
pub struct NvmlBackend {
    nvml: OnceLock<Result<Nvml, String>>,
}

impl NvmlBackend {
    pub fn new() -> Self {
        Self::default()
    }

    fn nvml(&self) -> Result<&Nvml, BackendError> {
        self.nvml
            .get_or_init(|| Nvml::init().map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| BackendError::BackendUnavailable(e.clone()))
    }

    /// Initializes the library now and reports whether it is usable.
    pub fn probe(&self) -> Result<(), BackendError> {
        self.nvml().map(|_| ())
    }
}

impl std::fmt::Debug for NvmlBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NvmlBackend")
            .field("initialized", &matches!(self.nvml.get(), Some(Ok(_))))
            .finish()
    }
}

impl DeviceBackend for NvmlBackend {
    fn enumerate_devices(&self) -> Result<Vec<DeviceInfo>, BackendError> {
        let nvml = self.nvml()?;
        let count = nvml
            .device_count()
            .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;
        let mut out = Vec::with_capacity(count as usize);
        for index in 0..count {
            let read_err = |e: nvml_wrapper::error::NvmlError| BackendError::ReadFailure {
                index,
                reason: e.to_string(),
            };
            let dev = nvml.device_by_index(index).map_err(read_err)?;
            let name = dev.name().map_err(read_err)?;
            let mem = dev.memory_info().map_err(read_err)?;
            out.push(DeviceInfo::new(index, name, mem.total)?);
        }
        Ok(out)
    }

    fn read_instant(&self, device_index: u32) -> Result<InstantReading, BackendError> {
        let nvml = self.nvml()?;
        let count = nvml
            .device_count()
            .map_err(|e| BackendError::BackendUnavailable(e.to_string()))?;
        if device_index >= count {
            return Err(BackendError::UnknownDevice {
                index: device_index,
                available: count as usize,
            });
        }
        let read_err = |e: nvml_wrapper::error::NvmlError| BackendError::ReadFailure {
            index: device_index,
            reason: e.to_string(),
        };
        let dev = nvml.device_by_index(device_index).map_err(read_err)?;
        let util = dev.utilization_rates().map_err(read_err)?;
        let mem = dev.memory_info().map_err(read_err)?;
        let temp = dev.temperature(TemperatureSensor::Gpu).map_err(read_err)?;
        let power = dev.power_usage().map_err(read_err)?;
        InstantReading::new(
            util.gpu,
            mem.used,
            mem.total,
            i32::try_from(temp).unwrap_or(i32::MAX),
            u64::from(power),
        )
        .map_err(|e| BackendError::ReadFailure {
            index: device_index,
            reason: e.to_string(),
        })
    }

    fn name(&self) -> &'static str {
        "nvml"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Holds on GPU-less CI; on a GPU host the library loads and the check is
    // skipped.
    #[test]
    fn missing_library_is_backend_unavailable() {
        let backend = NvmlBackend::new();
        if backend.probe().is_ok() {
            return;
        }
        assert!(matches!(
            backend.enumerate_devices(),
            Err(BackendError::BackendUnavailable(_))
        ));
        assert!(matches!(
            backend.read_instant(0),
            Err(BackendError::BackendUnavailable(_))
        ));
    }
}
