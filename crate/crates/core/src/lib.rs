//! Resource tracing for GPU workloads.
//!
//! A sampler polls one GPU at a fixed period while the workload runs and
//! records named event markers alongside the metric rows. A finished session
//! directory can then be parsed back, split into steps at the markers,
//! summarized per step, plotted, and fed into linear scaling fits.
//!
//! ```no_run
//! use std::sync::Arc;
//! use gputrace::clock::SystemClock;
//! use gputrace::device::SimBackend;
//! use gputrace::sampler::{Sampler, SamplerConfig};
//!
//! let clock = Arc::new(SystemClock::new());
//! let backend = Arc::new(SimBackend::idle(clock.clone()));
//! let sampler = Sampler::start(SamplerConfig::new("trace-out"), backend, clock).unwrap();
//! sampler.mark("kernel_start").unwrap();
//! // ... GPU work ...
//! sampler.mark("kernel_end").unwrap();
//! let paths = sampler.stop();
//! let session = gputrace::trace::parse_session(&paths.session_dir).unwrap();
//! ```

pub mod analysis;
pub mod cli;
pub mod clock;
pub mod device;
pub mod procmon;
pub mod profile;
pub mod report;
pub mod sampler;
pub mod schema;
pub mod trace;
pub mod units;
