//! Loading session directories and splitting them into steps.
//!
//! Each interval between consecutive markers belongs to the earlier marker:
//! marker `i` owns `[t_i, t_{i+1})` and the last marker owns
//! `[t_last, duration)`. Samples taken before the first marker form an
//! implicit `(pre)` step. A sample exactly on a boundary belongs to the later
//! step; the final step also owns a sample taken at the stop instant.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::device::DeviceInfo;
use crate::procmon::ProcSample;
use crate::schema::{
    decode_event, decode_meta, decode_proc, decode_sample, decode_table, encode_event, encode_meta,
    encode_proc, encode_sample, quote_field, Decoded, EventMarker, FormatError, Sample,
    SessionMeta, TracePaths, EVENTS_FILE, EVENTS_HEADER, META_FILE, METRICS_FILE, METRICS_HEADER,
    PROCESS_FILE, PROCESS_HEADER, STEPS_HEADER,
};

pub const PRE_STEP_LABEL: &str = "(pre)";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("schema mismatch in {file}: {reason}")]
    SchemaMismatch { file: String, reason: String },
    #[error("corrupt row in {file} at line {line}: {reason}")]
    CorruptRow {
        file: String,
        line: u64,
        reason: String,
    },
    #[error("session has no event markers")]
    NoMarkers,
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl From<FormatError> for TraceError {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Header {
                file,
                expected,
                found,
            } => TraceError::SchemaMismatch {
                file,
                reason: format!("expected header `{expected}`, found `{found}`"),
            },
            FormatError::Meta { file, reason } => TraceError::SchemaMismatch { file, reason },
            FormatError::Row { file, line, reason } => {
                TraceError::CorruptRow { file, line, reason }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Skip and tally bad rows instead of failing on the first one.
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub device: DeviceInfo,
    pub meta: SessionMeta,
    pub samples: Vec<Sample>,
    pub markers: Vec<EventMarker>,
    pub process: Option<Vec<ProcSample>>,
    pub paths: TracePaths,
    pub duration_ms: u64,
    /// Rows skipped in lenient mode, as `file:line: reason`.
    pub skipped_rows: Vec<String>,
}

impl Session {
    /// Largest memory reading over the whole session.
    pub fn peak_gpu_mem(&self) -> Option<u64> {
        self.samples.iter().filter_map(|s| s.mem_used_bytes).max()
    }

    pub fn peak_cpu_mem(&self) -> Option<u64> {
        self.process
            .as_ref()
            .and_then(|p| p.iter().map(|s| s.rss_bytes).max())
    }
}

fn read(path: &Path) -> Result<String, TraceError> {
    fs::read_to_string(path).map_err(|source| {
        if source.kind() == io::ErrorKind::NotFound {
            TraceError::MissingFile(path.to_path_buf())
        } else {
            TraceError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

/// Drops rows whose key does not advance as required, failing in strict mode.
fn enforce_order<T>(
    file: &str,
    decoded: Decoded<T>,
    opts: ParseOptions,
    skipped_rows: &mut Vec<String>,
    key: impl Fn(&T) -> u64,
    strictly: bool,
) -> Result<Vec<T>, TraceError> {
    for (line, reason) in decoded.skipped {
        skipped_rows.push(format!("{file}:{line}: {reason}"));
    }
    let mut out: Vec<T> = Vec::with_capacity(decoded.rows.len());
    for (row, line) in decoded.rows.into_iter().zip(decoded.lines) {
        if let Some(prev) = out.last() {
            let (a, b) = (key(prev), key(&row));
            if b < a || (strictly && b == a) {
                let reason = format!("elapsed_ms {b} does not follow {a}");
                if !opts.lenient {
                    return Err(TraceError::CorruptRow {
                        file: file.into(),
                        line,
                        reason,
                    });
                }
                skipped_rows.push(format!("{file}:{line}: {reason}"));
                continue;
            }
        }
        out.push(row);
    }
    Ok(out)
}

pub fn parse_session(dir: &Path) -> Result<Session, TraceError> {
    parse_session_with(dir, ParseOptions::default())
}

pub fn parse_session_with(dir: &Path, opts: ParseOptions) -> Result<Session, TraceError> {
    let strict = !opts.lenient;
    let process_path = dir.join(PROCESS_FILE);
    let paths = TracePaths::in_dir(dir, process_path.exists());

    let meta_text = read(&paths.meta_file)?;
    let metrics_text = read(&paths.metrics_csv)?;
    let events_text = read(&paths.events_csv)?;

    let meta = decode_meta(&meta_text)?;
    let device = DeviceInfo::new(
        meta.device_index,
        meta.device_name.clone(),
        meta.device_mem_total_bytes,
    )
    .map_err(|e| TraceError::SchemaMismatch {
        file: META_FILE.into(),
        reason: e.to_string(),
    })?;

    let mut skipped_rows = Vec::new();

    let device_index = meta.device_index;
    let decoded = decode_table(METRICS_FILE, &metrics_text, METRICS_HEADER, strict, |r| {
        let s = decode_sample(r)?;
        if s.device_index != device_index {
            return Err(format!(
                "device_index {} differs from session device {device_index}",
                s.device_index
            ));
        }
        Ok(s)
    })?;
    let samples = enforce_order(
        METRICS_FILE,
        decoded,
        opts,
        &mut skipped_rows,
        |s| s.elapsed_ms,
        true,
    )?;

    let decoded = decode_table(
        EVENTS_FILE,
        &events_text,
        EVENTS_HEADER,
        strict,
        decode_event,
    )?;
    let markers = enforce_order(
        EVENTS_FILE,
        decoded,
        opts,
        &mut skipped_rows,
        |m| m.elapsed_ms,
        false,
    )?;

    let process = match &paths.process_csv {
        Some(p) => {
            let text = read(p)?;
            let decoded = decode_table(PROCESS_FILE, &text, PROCESS_HEADER, strict, decode_proc)?;
            Some(enforce_order(
                PROCESS_FILE,
                decoded,
                opts,
                &mut skipped_rows,
                |s| s.elapsed_ms,
                false,
            )?)
        }
        None => None,
    };

    let last = |v: Option<u64>| v.unwrap_or(0);
    let duration_ms = [
        last(meta.duration_ms),
        last(samples.last().map(|s| s.elapsed_ms)),
        last(markers.last().map(|m| m.elapsed_ms)),
        last(
            process
                .as_ref()
                .and_then(|p| p.last())
                .map(|s| s.elapsed_ms),
        ),
    ]
    .into_iter()
    .max()
    .unwrap_or(0);

    Ok(Session {
        device,
        meta,
        samples,
        markers,
        process,
        paths,
        duration_ms,
        skipped_rows,
    })
}

/// Serialized contents of a session's files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionFiles {
    pub metrics: String,
    pub events: String,
    pub process: Option<String>,
    pub meta: String,
}

pub fn serialize_session(session: &Session) -> SessionFiles {
    let table = |header: &str, rows: Vec<String>| {
        let mut out = format!("{header}\n");
        rows.iter().for_each(|r| out.push_str(r));
        out
    };
    SessionFiles {
        metrics: table(
            METRICS_HEADER,
            session.samples.iter().map(encode_sample).collect(),
        ),
        events: table(
            EVENTS_HEADER,
            session.markers.iter().map(encode_event).collect(),
        ),
        process: session
            .process
            .as_ref()
            .map(|p| table(PROCESS_HEADER, p.iter().map(encode_proc).collect())),
        meta: encode_meta(&session.meta),
    }
}

/// Writes a session in the sampler's directory format.
pub fn write_session(session: &Session, dir: &Path) -> Result<TracePaths, TraceError> {
    let io_err = |path: PathBuf| move |source| TraceError::Io { path, source };
    fs::create_dir_all(dir).map_err(io_err(dir.to_path_buf()))?;
    let files = serialize_session(session);
    let paths = TracePaths::in_dir(dir, files.process.is_some());
    fs::write(&paths.metrics_csv, files.metrics).map_err(io_err(paths.metrics_csv.clone()))?;
    fs::write(&paths.events_csv, files.events).map_err(io_err(paths.events_csv.clone()))?;
    fs::write(&paths.meta_file, files.meta).map_err(io_err(paths.meta_file.clone()))?;
    if let (Some(p), Some(text)) = (&paths.process_csv, files.process) {
        fs::write(p, text).map_err(io_err(p.clone()))?;
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub label: String,
    pub start_ms: u64,
    pub end_ms: u64,
    /// Set on the step ending at the session's duration.
    pub closed: bool,
}

impl Step {
    pub fn contains(&self, elapsed_ms: u64) -> bool {
        elapsed_ms >= self.start_ms
            && (elapsed_ms < self.end_ms || (self.closed && elapsed_ms == self.end_ms))
    }

    pub fn runtime_ms(&self) -> u64 {
        self.end_ms - self.start_ms
    }

    pub fn is_pre(&self) -> bool {
        self.label == PRE_STEP_LABEL && self.start_ms == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribution {
    pub steps: Vec<Step>,
    /// One entry per zero-length step that was dropped.
    pub diagnostics: Vec<String>,
}

pub fn attribute_steps(session: &Session) -> Result<Attribution, TraceError> {
    let first = session.markers.first().ok_or(TraceError::NoMarkers)?;
    let mut steps = Vec::with_capacity(session.markers.len() + 1);
    let mut diagnostics = Vec::new();

    if session
        .samples
        .iter()
        .any(|s| s.elapsed_ms < first.elapsed_ms)
    {
        steps.push(Step {
            label: PRE_STEP_LABEL.into(),
            start_ms: 0,
            end_ms: first.elapsed_ms,
            closed: false,
        });
    }
    for (i, m) in session.markers.iter().enumerate() {
        let end_ms = session
            .markers
            .get(i + 1)
            .map_or(session.duration_ms, |next| next.elapsed_ms);
        if end_ms > m.elapsed_ms {
            steps.push(Step {
                label: m.label.clone(),
                start_ms: m.elapsed_ms,
                end_ms,
                closed: false,
            });
        } else {
            diagnostics.push(format!(
                "zero-length step `{}` at {} ms dropped",
                m.label, m.elapsed_ms
            ));
        }
    }
    if let Some(last) = steps.last_mut() {
        last.closed = last.end_ms == session.duration_ms;
    }
    Ok(Attribution { steps, diagnostics })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub label: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub runtime_s: f64,
    pub peak_gpu_mem_bytes: Option<u64>,
    pub peak_cpu_mem_bytes: Option<u64>,
    pub mean_gpu_util_pct: Option<f64>,
    /// Non-gap samples inside the step.
    pub sample_count: usize,
}

/// Summarizes already attributed steps.
pub fn summarize(session: &Session, steps: &[Step]) -> Vec<StepSummary> {
    steps
        .iter()
        .map(|step| {
            let inside: Vec<&Sample> = session
                .samples
                .iter()
                .filter(|s| step.contains(s.elapsed_ms) && !s.is_gap())
                .collect();
            let utils: Vec<u32> = inside.iter().filter_map(|s| s.gpu_util_pct).collect();
            let mean = (!utils.is_empty())
                .then(|| utils.iter().map(|&u| f64::from(u)).sum::<f64>() / utils.len() as f64);
            let peak_cpu = session.process.as_ref().and_then(|p| {
                p.iter()
                    .filter(|s| step.contains(s.elapsed_ms))
                    .map(|s| s.rss_bytes)
                    .max()
            });
            StepSummary {
                label: step.label.clone(),
                start_ms: step.start_ms,
                end_ms: step.end_ms,
                runtime_s: step.runtime_ms() as f64 / 1000.0,
                peak_gpu_mem_bytes: inside.iter().filter_map(|s| s.mem_used_bytes).max(),
                peak_cpu_mem_bytes: peak_cpu,
                mean_gpu_util_pct: mean,
                sample_count: inside.len(),
            }
        })
        .collect()
}

pub fn summarize_steps(session: &Session) -> Result<Vec<StepSummary>, TraceError> {
    let attribution = attribute_steps(session)?;
    Ok(summarize(session, &attribution.steps))
}

/// Sum of step runtimes in whole milliseconds.
pub fn total_runtime_ms(rows: &[StepSummary]) -> u64 {
    rows.iter().map(|r| r.end_ms - r.start_ms).sum()
}

pub fn steps_csv(rows: &[StepSummary]) -> String {
    let opt = |v: Option<u64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut out = format!("{STEPS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            quote_field(&r.label),
            r.runtime_s,
            opt(r.peak_gpu_mem_bytes),
            opt(r.peak_cpu_mem_bytes),
            r.mean_gpu_util_pct
                .map(|m| format!("{m:.2}"))
                .unwrap_or_default(),
            r.sample_count
        ));
    }
    out
}
