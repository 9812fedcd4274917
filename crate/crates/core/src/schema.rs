//! On-disk layout of a session directory.
//!
//! The sampler writes these files and the trace parser reads them back; both
//! go through the encoders and decoders here so the two sides cannot drift.
//!
//! ```text
//! <session>/metrics.csv   elapsed_ms,device_index,gpu_util_pct,mem_used_bytes,mem_total_bytes,temperature_c,power_mw
//! <session>/events.csv    elapsed_ms,label
//! <session>/process.csv   elapsed_ms,cpu_pct,rss_bytes        (optional)
//! <session>/meta.txt      key=value lines
//! <session>/marks.ctl     newline-delimited labels appended by other processes
//! ```
//!
//! All `elapsed_ms` values are whole milliseconds on the monotonic clock since
//! the sampler started. The wall-clock anchor lives only in the meta file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::DateTime;
use thiserror::Error;

use crate::procmon::ProcSample;

pub const SCHEMA_VERSION: u32 = 1;

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const PROCESS_FILE: &str = "process.csv";
pub const META_FILE: &str = "meta.txt";
pub const MARK_CONTROL_FILE: &str = "marks.ctl";

pub const METRICS_HEADER: &str =
    "elapsed_ms,device_index,gpu_util_pct,mem_used_bytes,mem_total_bytes,temperature_c,power_mw";
pub const EVENTS_HEADER: &str = "elapsed_ms,label";
pub const PROCESS_HEADER: &str = "elapsed_ms,cpu_pct,rss_bytes";
pub const STEPS_HEADER: &str =
    "label,runtime_s,peak_gpu_mem_bytes,peak_cpu_mem_bytes,mean_gpu_util_pct,sample_count";

pub const ENV_SESSION_DIR: &str = "GPUTRACE_SESSION_DIR";
pub const ENV_MARK_FILE: &str = "GPUTRACE_MARK_FILE";

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("{file}: header mismatch: expected `{expected}`, found `{found}`")]
    Header {
        file: String,
        expected: String,
        found: String,
    },
    #[error("{file}:{line}: {reason}")]
    Row {
        file: String,
        line: u64,
        reason: String,
    },
    #[error("{file}: {reason}")]
    Meta { file: String, reason: String },
}

/// Paths of one session's files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TracePaths {
    pub session_dir: PathBuf,
    pub metrics_csv: PathBuf,
    pub events_csv: PathBuf,
    pub process_csv: Option<PathBuf>,
    pub meta_file: PathBuf,
}

impl TracePaths {
    pub fn in_dir(dir: &Path, with_process: bool) -> Self {
        Self {
            session_dir: dir.to_path_buf(),
            metrics_csv: dir.join(METRICS_FILE),
            events_csv: dir.join(EVENTS_FILE),
            process_csv: with_process.then(|| dir.join(PROCESS_FILE)),
            meta_file: dir.join(META_FILE),
        }
    }
}

/// One metrics row. Metric fields are `None` on gap rows (failed reads).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub elapsed_ms: u64,
    pub device_index: u32,
    pub gpu_util_pct: Option<u32>,
    pub mem_used_bytes: Option<u64>,
    pub mem_total_bytes: Option<u64>,
    pub temperature_c: Option<i32>,
    pub power_mw: Option<u64>,
}

impl Sample {
    pub fn gap(elapsed_ms: u64, device_index: u32) -> Self {
        Self {
            elapsed_ms,
            device_index,
            gpu_util_pct: None,
            mem_used_bytes: None,
            mem_total_bytes: None,
            temperature_c: None,
            power_mw: None,
        }
    }

    pub fn from_reading(
        elapsed_ms: u64,
        device_index: u32,
        r: &crate::device::InstantReading,
    ) -> Self {
        Self {
            elapsed_ms,
            device_index,
            gpu_util_pct: Some(r.gpu_utilization()),
            mem_used_bytes: Some(r.memory_used()),
            mem_total_bytes: Some(r.memory_total()),
            temperature_c: Some(r.temperature()),
            power_mw: Some(r.power_draw()),
        }
    }

    pub fn is_gap(&self) -> bool {
        self.gpu_util_pct.is_none()
            && self.mem_used_bytes.is_none()
            && self.mem_total_bytes.is_none()
            && self.temperature_c.is_none()
            && self.power_mw.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventMarker {
    pub elapsed_ms: u64,
    pub label: String,
}

/// Contents of the meta file.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionMeta {
    pub schema_version: u32,
    /// RFC 3339, UTC.
    pub start_wall_utc: String,
    pub stop_wall_utc: Option<String>,
    pub period_s: f64,
    pub device_index: u32,
    pub device_name: String,
    pub device_mem_total_bytes: u64,
    /// Monotonic elapsed time at stop.
    pub duration_ms: Option<u64>,
    pub child_exit_status: Option<i32>,
    pub diagnostics: Vec<String>,
    /// Keys this version does not know, kept in file order.
    pub extra: Vec<(String, String)>,
}

/// Wraps a field in double quotes when it contains a comma, quote, or line
/// break; inner quotes are doubled.
pub fn quote_field(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn encode_sample(s: &Sample) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        s.elapsed_ms,
        s.device_index,
        opt(s.gpu_util_pct),
        opt(s.mem_used_bytes),
        opt(s.mem_total_bytes),
        opt(s.temperature_c),
        opt(s.power_mw)
    )
}

pub fn encode_event(e: &EventMarker) -> String {
    format!("{},{}\n", e.elapsed_ms, quote_field(&e.label))
}

pub fn encode_proc(p: &ProcSample) -> String {
    format!("{},{},{}\n", p.elapsed_ms, p.cpu_pct, p.rss_bytes)
}

fn single_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

pub fn encode_meta(m: &SessionMeta) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: &str| {
        let _ = writeln!(out, "{k}={}", single_line(v));
    };
    kv("schema_version", &m.schema_version.to_string());
    kv("start_wall_utc", &m.start_wall_utc);
    kv("period_s", &m.period_s.to_string());
    kv("device_index", &m.device_index.to_string());
    kv("device_name", &m.device_name);
    kv(
        "device_mem_total_bytes",
        &m.device_mem_total_bytes.to_string(),
    );
    if let Some(stop) = &m.stop_wall_utc {
        kv("stop_wall_utc", stop);
    }
    if let Some(d) = m.duration_ms {
        kv("duration_ms", &d.to_string());
    }
    if let Some(code) = m.child_exit_status {
        kv("child_exit_status", &code.to_string());
    }
    for d in &m.diagnostics {
        kv("diagnostic", d);
    }
    for (k, v) in &m.extra {
        kv(k, v);
    }
    out
}

pub fn decode_meta(text: &str) -> Result<SessionMeta, FormatError> {
    let err = |reason: String| FormatError::Meta {
        file: META_FILE.into(),
        reason,
    };
    let mut schema_version = None;
    let mut start_wall_utc = None;
    let mut stop_wall_utc = None;
    let mut period_s = None;
    let mut device_index = None;
    let mut device_name = None;
    let mut device_mem_total_bytes = None;
    let mut duration_ms = None;
    let mut child_exit_status = None;
    let mut diagnostics = Vec::new();
    let mut extra = Vec::new();

    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("line {}: expected key=value", i + 1)))?;
        let bad = |what: &str| err(format!("line {}: invalid {what} `{value}`", i + 1));
        match key {
            "schema_version" => schema_version = Some(value.parse::<u32>().map_err(|_| bad(key))?),
            "start_wall_utc" => {
                DateTime::parse_from_rfc3339(value).map_err(|_| bad(key))?;
                start_wall_utc = Some(value.to_string());
            }
            "stop_wall_utc" => {
                DateTime::parse_from_rfc3339(value).map_err(|_| bad(key))?;
                stop_wall_utc = Some(value.to_string());
            }
            "period_s" => {
                let p = value.parse::<f64>().map_err(|_| bad(key))?;
                if !(p.is_finite() && p > 0.0) {
                    return Err(bad(key));
                }
                period_s = Some(p);
            }
            "device_index" => device_index = Some(value.parse::<u32>().map_err(|_| bad(key))?),
            "device_name" => device_name = Some(value.to_string()),
            "device_mem_total_bytes" => {
                device_mem_total_bytes = Some(value.parse::<u64>().map_err(|_| bad(key))?)
            }
            "duration_ms" => duration_ms = Some(value.parse::<u64>().map_err(|_| bad(key))?),
            "child_exit_status" => {
                child_exit_status = Some(value.parse::<i32>().map_err(|_| bad(key))?)
            }
            "diagnostic" => diagnostics.push(value.to_string()),
            _ => extra.push((key.to_string(), value.to_string())),
        }
    }

    let schema_version = schema_version.ok_or_else(|| err("missing schema_version".into()))?;
    if schema_version != SCHEMA_VERSION {
        return Err(err(format!(
            "unsupported schema_version {schema_version} (expected {SCHEMA_VERSION})"
        )));
    }
    let missing = |k: &str| err(format!("missing {k}"));
    Ok(SessionMeta {
        schema_version,
        start_wall_utc: start_wall_utc.ok_or_else(|| missing("start_wall_utc"))?,
        stop_wall_utc,
        period_s: period_s.ok_or_else(|| missing("period_s"))?,
        device_index: device_index.ok_or_else(|| missing("device_index"))?,
        device_name: device_name.ok_or_else(|| missing("device_name"))?,
        device_mem_total_bytes: device_mem_total_bytes
            .ok_or_else(|| missing("device_mem_total_bytes"))?,
        duration_ms,
        child_exit_status,
        diagnostics,
        extra,
    })
}

/// Result of decoding one CSV table.
#[derive(Debug)]
pub struct Decoded<T> {
    pub rows: Vec<T>,
    /// File line of each entry in `rows`.
    pub lines: Vec<u64>,
    /// Rows skipped in lenient mode, as (line, reason).
    pub skipped: Vec<(u64, String)>,
}

/// Checks the header line byte-for-byte and decodes the remaining records.
///
/// In strict mode the first bad row aborts; otherwise bad rows are skipped
/// and reported in [`Decoded::skipped`].
pub fn decode_table<T>(
    file: &str,
    text: &str,
    header: &str,
    strict: bool,
    decode: impl Fn(&csv::StringRecord) -> Result<T, String>,
) -> Result<Decoded<T>, FormatError> {
    let (first, rest) = match text.split_once('\n') {
        Some((first, rest)) => (first, rest),
        None => (text, ""),
    };
    if first != header {
        return Err(FormatError::Header {
            file: file.into(),
            expected: header.into(),
            found: first.into(),
        });
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(rest.as_bytes());
    let columns = header.split(',').count();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    let mut skipped = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let before = reader.position().line();
        let read = reader.read_record(&mut record);
        // +1 for the header line stripped above.
        let line = record.position().map_or(before, |p| p.line()) + 1;
        let result = match read {
            Ok(false) => break,
            Ok(true) if record.len() != columns => {
                Err(format!("expected {columns} fields, found {}", record.len()))
            }
            Ok(true) => decode(&record),
            Err(e) => Err(e.to_string()),
        };
        match result {
            Ok(row) => {
                rows.push(row);
                lines.push(line);
            }
            Err(reason) if strict => {
                return Err(FormatError::Row {
                    file: file.into(),
                    line,
                    reason,
                })
            }
            Err(reason) => skipped.push((line, reason)),
        }
    }
    Ok(Decoded {
        rows,
        lines,
        skipped,
    })
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T, String> {
    rec[i]
        .parse()
        .map_err(|_| format!("invalid {name} `{}`", &rec[i]))
}

fn opt_field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    i: usize,
    name: &str,
) -> Result<Option<T>, String> {
    if rec[i].is_empty() {
        Ok(None)
    } else {
        field(rec, i, name).map(Some)
    }
}

pub fn decode_sample(rec: &csv::StringRecord) -> Result<Sample, String> {
    let s = Sample {
        elapsed_ms: field(rec, 0, "elapsed_ms")?,
        device_index: field(rec, 1, "device_index")?,
        gpu_util_pct: opt_field(rec, 2, "gpu_util_pct")?,
        mem_used_bytes: opt_field(rec, 3, "mem_used_bytes")?,
        mem_total_bytes: opt_field(rec, 4, "mem_total_bytes")?,
        temperature_c: opt_field(rec, 5, "temperature_c")?,
        power_mw: opt_field(rec, 6, "power_mw")?,
    };
    if s.gpu_util_pct.is_some_and(|u| u > 100) {
        return Err("gpu_util_pct above 100".into());
    }
    if let (Some(used), Some(total)) = (s.mem_used_bytes, s.mem_total_bytes) {
        if used > total {
            return Err(format!(
                "mem_used_bytes {used} exceeds mem_total_bytes {total}"
            ));
        }
    }
    Ok(s)
}

pub fn decode_event(rec: &csv::StringRecord) -> Result<EventMarker, String> {
    let label = rec[1].to_string();
    if label.is_empty() {
        return Err("empty label".into());
    }
    Ok(EventMarker {
        elapsed_ms: field(rec, 0, "elapsed_ms")?,
        label,
    })
}

pub fn decode_proc(rec: &csv::StringRecord) -> Result<ProcSample, String> {
    let cpu_pct: f64 = field(rec, 1, "cpu_pct")?;
    if !(cpu_pct.is_finite() && cpu_pct >= 0.0) {
        return Err(format!("invalid cpu_pct `{}`", &rec[1]));
    }
    Ok(ProcSample {
        elapsed_ms: field(rec, 0, "elapsed_ms")?,
        cpu_pct,
        rss_bytes: field(rec, 2, "rss_bytes")?,
    })
}
