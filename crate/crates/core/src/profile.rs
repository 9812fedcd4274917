//! Profile description files and synthetic session generation.
//!
//! A profile is line-oriented text:
//!
//! ```text
//! # comment
//! device,<name>,<mem_total_gb>                        optional, default "Simulated GPU",140
//! <duration_s>,<gpu_util_pct>,<mem_used_gb>,<temp_c>,<power_w>
//! mark,<elapsed_s>,<label>                            label may contain commas
//! cpu,<duration_s>,<cpu_pct>,<rss_gb>                 optional process series
//! ```
//!
//! Device segments and `cpu` segments each play back in file order. Marks are
//! placed at absolute elapsed times.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::clock::SimClock;
use crate::device::{DeviceInfo, SimBackend, SimProfile, SimSegment};
use crate::procmon::{process_csv, ProcSample};
use crate::sampler::{Sampler, SamplerConfig, SamplerError};
use crate::schema::{TracePaths, PROCESS_FILE};
use crate::units::gb_to_bytes;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("profile has no device segments")]
    Empty,
    #[error("invalid profile: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpuSegment {
    pub duration: Duration,
    pub cpu_pct: f64,
    pub rss_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSpec {
    pub profile: SimProfile,
    /// Sorted by time; ties keep file order.
    pub marks: Vec<(Duration, String)>,
    pub cpu: Vec<CpuSegment>,
}

impl ProfileSpec {
    /// Profile length, extended to cover the last mark.
    pub fn duration(&self) -> Duration {
        let last_mark = self.marks.last().map_or(Duration::ZERO, |m| m.0);
        self.profile.total_duration().max(last_mark)
    }

    pub fn cpu_at(&self, t: Duration) -> Option<&CpuSegment> {
        let mut end = Duration::ZERO;
        for seg in &self.cpu {
            end += seg.duration;
            if t < end {
                return Some(seg);
            }
        }
        self.cpu.last()
    }
}

fn millis(secs: f64) -> Duration {
    Duration::from_millis((secs * 1000.0).round() as u64)
}

pub fn parse_profile(text: &str) -> Result<ProfileSpec, ProfileError> {
    let mut device = DeviceInfo::new(0, "Simulated GPU", gb_to_bytes(140.0)).unwrap();
    let mut segments = Vec::new();
    let mut marks = Vec::new();
    let mut cpu = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| ProfileError::Syntax {
            line: i + 1,
            reason,
        };
        let num = |field: &str, what: &str| -> Result<f64, ProfileError> {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(format!("invalid {what} `{field}`")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(err(format!("{what} must be a non-negative number")));
            }
            Ok(v)
        };

        if let Some(rest) = line.strip_prefix("mark,") {
            let (t, label) = rest
                .split_once(',')
                .ok_or_else(|| err("expected mark,<elapsed_s>,<label>".into()))?;
            if label.is_empty() {
                return Err(err("empty mark label".into()));
            }
            marks.push((millis(num(t, "elapsed_s")?), label.to_string()));
        } else if let Some(rest) = line.strip_prefix("device,") {
            let (name, gb) = rest
                .rsplit_once(',')
                .ok_or_else(|| err("expected device,<name>,<mem_total_gb>".into()))?;
            device = DeviceInfo::new(0, name.trim(), gb_to_bytes(num(gb, "mem_total_gb")?))
                .map_err(|e| err(e.to_string()))?;
        } else if let Some(rest) = line.strip_prefix("cpu,") {
            let f: Vec<&str> = rest.split(',').collect();
            if f.len() != 3 {
                return Err(err("expected cpu,<duration_s>,<cpu_pct>,<rss_gb>".into()));
            }
            let duration = millis(num(f[0], "duration_s")?);
            if duration.is_zero() {
                return Err(err("duration must be at least 1 ms".into()));
            }
            cpu.push(CpuSegment {
                duration,
                cpu_pct: num(f[1], "cpu_pct")?,
                rss_bytes: gb_to_bytes(num(f[2], "rss_gb")?),
            });
        } else {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(err(format!(
                    "expected duration_s,gpu_util_pct,mem_used_gb,temp_c,power_w; found {} fields",
                    f.len()
                )));
            }
            let util = num(f[1], "gpu_util_pct")?;
            if util > 100.0 {
                return Err(err("gpu_util_pct above 100".into()));
            }
            let temp: f64 = f[3]
                .trim()
                .parse()
                .map_err(|_| err(format!("invalid temp_c `{}`", f[3])))?;
            segments.push(SimSegment {
                duration: millis(num(f[0], "duration_s")?),
                gpu_utilization: util.round() as u32,
                memory_used: gb_to_bytes(num(f[2], "mem_used_gb")?),
                temperature: temp.round() as i32,
                power_draw: (num(f[4], "power_w")? * 1000.0).round() as u64,
            });
        }
    }
    if segments.is_empty() {
        return Err(ProfileError::Empty);
    }
    let profile =
        SimProfile::new(device, segments).map_err(|e| ProfileError::Invalid(e.to_string()))?;
    marks.sort_by_key(|m| m.0);
    Ok(ProfileSpec {
        profile,
        marks,
        cpu,
    })
}

/// Runs the sampler against the profile on a virtual clock and writes a
/// complete session to `out_dir`. Takes no wall time.
pub fn simulate_session(
    spec: &ProfileSpec,
    out_dir: &Path,
    period_s: f64,
) -> Result<TracePaths, SimulateError> {
    let clock = Arc::new(SimClock::new());
    let backend = Arc::new(SimBackend::new(spec.profile.clone(), clock.clone()));
    let mut config = SamplerConfig::new(out_dir).period(period_s);
    config.watch_mark_file = false;
    let sampler = Sampler::start(config, backend, clock.clone())?;
    for (t, label) in &spec.marks {
        clock.run_until(*t);
        sampler.mark(label)?;
    }
    let duration = spec.duration();
    clock.run_until(duration);
    let mut paths = sampler.stop();

    if !spec.cpu.is_empty() {
        let period = millis(period_s);
        let mut series = Vec::new();
        let mut t = Duration::ZERO;
        while t <= duration {
            let seg = spec.cpu_at(t).expect("cpu segments present");
            series.push(ProcSample {
                elapsed_ms: t.as_millis() as u64,
                cpu_pct: seg.cpu_pct,
                rss_bytes: seg.rss_bytes,
            });
            t += period;
        }
        let path = out_dir.join(PROCESS_FILE);
        std::fs::write(&path, process_csv(&series))?;
        paths.process_csv = Some(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_session;

    const SMALL: &str = "\
# two phases
device,Test GPU,16
mark,0,warmup
1,0,0.5,30,50
mark,1.5,compute, heavy
2,100,12,70,300
cpu,3,100,2
";

    #[test]
    fn parses_lines() {
        let spec = parse_profile(SMALL).unwrap();
        assert_eq!(spec.profile.device().name, "Test GPU");
        assert_eq!(spec.profile.device().memory_total, 16 << 30);
        assert_eq!(spec.profile.segments().len(), 2);
        assert_eq!(spec.profile.segments()[1].power_draw, 300_000);
        assert_eq!(
            spec.marks,
            vec![
                (Duration::ZERO, "warmup".to_string()),
                (Duration::from_millis(1500), "compute, heavy".to_string())
            ]
        );
        assert_eq!(spec.duration(), Duration::from_secs(3));
    }

    #[test]
    fn syntax_errors_name_the_line() {
        for (text, line) in [
            ("1,2,3\n", 1),
            ("1,0,0,30,50\nmark,x,lbl\n", 2),
            ("1,0,0,30,50\n\nmark,1,\n", 3),
            ("1,101,0,30,50\n", 1),
            ("1,0,-1,30,50\n", 1),
        ] {
            match parse_profile(text) {
                Err(ProfileError::Syntax { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(
            parse_profile("# nothing\n"),
            Err(ProfileError::Empty)
        ));
        assert!(matches!(
            parse_profile("device,x,1\n1,0,2,30,50\n"),
            Err(ProfileError::Invalid(_))
        ));
    }

    #[test]
    fn simulate_then_parse() {
        let spec = parse_profile(SMALL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s");
        let paths = simulate_session(&spec, &out, 0.5).unwrap();
        assert!(paths.process_csv.is_some());
        let s = parse_session(&out).unwrap();
        assert_eq!(s.duration_ms, 3000);
        assert_eq!(s.samples.len(), 7);
        assert_eq!(s.samples[1].gpu_util_pct, Some(0));
        assert_eq!(s.samples[2].gpu_util_pct, Some(100));
        assert_eq!(s.samples[2].mem_used_bytes, Some(12 << 30));
        assert_eq!(s.markers[1].label, "compute, heavy");
        assert_eq!(s.markers[1].elapsed_ms, 1500);
        assert_eq!(s.process.as_ref().unwrap().len(), 7);
        assert_eq!(s.meta.device_name, "Test GPU");
    }
}
