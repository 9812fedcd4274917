use std::sync::Arc;
use std::time::Duration;

use super::{BackendError, DeviceBackend, DeviceInfo, InstantReading};
use crate::clock::Clock;
use crate::units::gb_to_bytes;

/// One constant stretch of a scripted profile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimSegment {
    pub duration: Duration,
    pub gpu_utilization: u32,
    pub memory_used: u64,
    pub temperature: i32,
    /// Milliwatts.
    pub power_draw: u64,
}

/// Piecewise-constant device behaviour over elapsed time.
///
/// Segment `i` covers `[start_i, start_i + duration_i)`. Past the end of the
/// last segment its values repeat.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimProfile {
    segments: Vec<SimSegment>,
    device: DeviceInfo,
}

impl SimProfile {
    pub fn new(device: DeviceInfo, segments: Vec<SimSegment>) -> Result<Self, BackendError> {
        if segments.is_empty() {
            return Err(BackendError::InvalidReading(
                "profile needs at least one segment".into(),
            ));
        }
        for (i, seg) in segments.iter().enumerate() {
            if seg.duration.is_zero() {
                return Err(BackendError::InvalidReading(format!(
                    "segment {i} has zero duration"
                )));
            }
            // Validates utilization and memory bounds up front.
            InstantReading::new(
                seg.gpu_utilization,
                seg.memory_used,
                device.memory_total,
                seg.temperature,
                seg.power_draw,
            )
            .map_err(|e| BackendError::InvalidReading(format!("segment {i}: {e}")))?;
        }
        Ok(Self { segments, device })
    }

    /// A flat idle profile on one 140 GB device.
    pub fn idle() -> Self {
        let device = DeviceInfo::new(0, "Simulated GPU", gb_to_bytes(140.0)).unwrap();
        Self::new(
            device,
            vec![SimSegment {
                duration: Duration::from_secs(1),
                gpu_utilization: 0,
                memory_used: 0,
                temperature: 30,
                power_draw: 50_000,
            }],
        )
        .unwrap()
    }

    pub fn device(&self) -> &DeviceInfo {
        &self.device
    }

    pub fn segments(&self) -> &[SimSegment] {
        &self.segments
    }

    pub fn total_duration(&self) -> Duration {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// The segment active at elapsed time `t`.
    pub fn segment_at(&self, t: Duration) -> &SimSegment {
        let mut end = Duration::ZERO;
        for seg in &self.segments {
            end += seg.duration;
            if t < end {
                return seg;
            }
        }
        self.segments.last().expect("non-empty by construction")
    }

    pub fn reading_at(&self, t: Duration) -> InstantReading {
        let seg = self.segment_at(t);
        InstantReading::new(
            seg.gpu_utilization,
            seg.memory_used,
            self.device.memory_total,
            seg.temperature,
            seg.power_draw,
        )
        .expect("segments validated at construction")
    }
}

/// Deterministic backend that replays a [`SimProfile`] against a clock.
pub struct SimBackend {
    profile: Option<SimProfile>,
    clock: Arc<dyn Clock>,
    failures: Vec<(Duration, Duration)>,
}

impl SimBackend {
    pub fn new(profile: SimProfile, clock: Arc<dyn Clock>) -> Self {
        Self {
            profile: Some(profile),
            clock,
            failures: Vec::new(),
        }
    }

    pub fn idle(clock: Arc<dyn Clock>) -> Self {
        Self::new(SimProfile::idle(), clock)
    }

    /// A backend that reports no devices at all.
    pub fn without_devices(clock: Arc<dyn Clock>) -> Self {
        Self {
            profile: None,
            clock,
            failures: Vec::new(),
        }
    }

    /// Makes reads inside `[start, end)` fail with [`BackendError::ReadFailure`].
    pub fn with_failure_window(mut self, start: Duration, end: Duration) -> Self {
        self.failures.push((start, end));
        self
    }

    pub fn profile(&self) -> Option<&SimProfile> {
        self.profile.as_ref()
    }

    /// Reading at an explicit elapsed time, ignoring the clock.
    pub fn read_at(&self, device_index: u32, t: Duration) -> Result<InstantReading, BackendError> {
        let profile = match &self.profile {
            Some(p) if p.device.index == device_index => p,
            other => {
                return Err(BackendError::UnknownDevice {
                    index: device_index,
                    available: usize::from(other.is_some()),
                })
            }
        };
        if self.failures.iter().any(|&(s, e)| t >= s && t < e) {
            return Err(BackendError::ReadFailure {
                index: device_index,
                reason: "scripted failure".into(),
            });
        }
        Ok(profile.reading_at(t))
    }
}

impl DeviceBackend for SimBackend {
    fn enumerate_devices(&self) -> Result<Vec<DeviceInfo>, BackendError> {
        Ok(self.profile.iter().map(|p| p.device.clone()).collect())
    }

    fn read_instant(&self, device_index: u32) -> Result<InstantReading, BackendError> {
        self.read_at(device_index, self.clock.now())
    }

    fn name(&self) -> &'static str {
        "sim"
    }
}
