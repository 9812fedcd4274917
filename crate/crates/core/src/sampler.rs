//! Background GPU sampling with event markers.
//!
//! Lifecycle: [`Sampler::start`] takes one reading immediately and then one
//! per period on a fixed grid `t0 + k * period`; [`Sampler::mark`] appends a
//! labelled timestamp; [`Sampler::stop`] joins every worker and finalizes the
//! meta file. Other processes can add markers by appending lines to the
//! session's control file (see [`crate::schema::MARK_CONTROL_FILE`]).

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use chrono::{SecondsFormat, Utc};
use log::{debug, warn};
use thiserror::Error;

use crate::clock::{as_millis, Clock, StopSignal};
use crate::device::{BackendError, DeviceBackend, DeviceInfo};
use crate::procmon::monitor_process;
use crate::schema::{
    encode_event, encode_meta, encode_proc, encode_sample, EventMarker, Sample, SessionMeta,
    TracePaths, ENV_MARK_FILE, ENV_SESSION_DIR, EVENTS_HEADER, MARK_CONTROL_FILE, METRICS_HEADER,
    PROCESS_HEADER, SCHEMA_VERSION,
};

/// Shortest accepted period; timestamps have millisecond resolution.
pub const MIN_PERIOD_S: f64 = 0.001;

/// How often the control file is checked for new labels.
const MARK_POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid marker label: {0}")]
    InvalidLabel(String),
    #[error("sampler already stopped")]
    SamplerStopped,
    #[error("output directory {path} not writable: {reason}")]
    OutputNotWritable { path: PathBuf, reason: String },
    #[error("{} already holds a session", .0.display())]
    SessionExists(PathBuf),
    #[error("failed to spawn `{command}`: {reason}")]
    SpawnFailure { command: String, reason: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub period_s: f64,
    pub device_index: u32,
    pub output_dir: PathBuf,
    /// Tail the marker control file for labels from other processes.
    pub watch_mark_file: bool,
}

impl SamplerConfig {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            period_s: 1.0,
            device_index: 0,
            output_dir: output_dir.into(),
            watch_mark_file: true,
        }
    }

    pub fn period(mut self, period_s: f64) -> Self {
        self.period_s = period_s;
        self
    }

    pub fn device(mut self, index: u32) -> Self {
        self.device_index = index;
        self
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.period_s.is_finite() && self.period_s >= MIN_PERIOD_S) {
            return Err(SamplerError::InvalidConfig(format!(
                "period must be at least {MIN_PERIOD_S} s, got {}",
                self.period_s
            )));
        }
        Ok(())
    }
}

/// Checks a marker label: non-empty after the newline-delimited control
/// protocol is taken into account.
pub fn validate_label(label: &str) -> Result<(), SamplerError> {
    if label.is_empty() {
        return Err(SamplerError::InvalidLabel("label is empty".into()));
    }
    Ok(())
}

struct Shared {
    clock: Arc<dyn Clock>,
    t0: Duration,
    events: Mutex<Option<File>>,
    diagnostics: Mutex<Vec<String>>,
}

impl Shared {
    fn elapsed_ms(&self) -> u64 {
        as_millis(self.clock.now().saturating_sub(self.t0))
    }

    fn diagnostic(&self, msg: String) {
        warn!("{msg}");
        self.diagnostics.lock().unwrap().push(msg);
    }

    fn mark(&self, label: &str) -> Result<(), SamplerError> {
        validate_label(label)?;
        let mut guard = self.events.lock().unwrap();
        let file = guard.as_mut().ok_or(SamplerError::SamplerStopped)?;
        // Timestamp under the lock so rows are ordered by receipt.
        let row = encode_event(&EventMarker {
            elapsed_ms: self.elapsed_ms(),
            label: label.to_string(),
        });
        file.write_all(row.as_bytes())?;
        Ok(())
    }
}

struct Worker {
    stop: Arc<StopSignal>,
    handle: JoinHandle<()>,
}

impl Worker {
    fn finish(self, clock: &dyn Clock) {
        self.stop.raise();
        clock.wake();
        if self.handle.join().is_err() {
            warn!("worker thread panicked");
        }
    }
}

struct Running {
    poller: Worker,
    tailer: Option<Worker>,
    procmon: Option<Worker>,
    meta: SessionMeta,
}

enum State {
    Running(Box<Running>),
    Stopped(TracePaths),
}

/// A running (or stopped) sampling session.
///
/// `mark` may be called from any thread. Dropping a running sampler stops it.
pub struct Sampler {
    shared: Arc<Shared>,
    dir: PathBuf,
    state: Mutex<State>,
    child_exit_status: Mutex<Option<i32>>,
}

fn not_writable(path: &Path, e: impl std::fmt::Display) -> SamplerError {
    SamplerError::OutputNotWritable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn create_with_header(path: &Path, header: &str) -> Result<File, SamplerError> {
    let mut f = File::create(path).map_err(|e| not_writable(path, e))?;
    f.write_all(format!("{header}\n").as_bytes())
        .map_err(|e| not_writable(path, e))?;
    Ok(f)
}

fn wall_now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl Sampler {
    pub fn start(
        config: SamplerConfig,
        backend: Arc<dyn DeviceBackend>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, SamplerError> {
        config.validate()?;
        let device: DeviceInfo = backend.device(config.device_index)?;

        let dir = config.output_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| not_writable(&dir, e))?;
        let paths = TracePaths::in_dir(&dir, false);
        if paths.metrics_csv.exists() {
            return Err(SamplerError::SessionExists(dir));
        }
        let mut metrics = create_with_header(&paths.metrics_csv, METRICS_HEADER)?;
        let events = create_with_header(&paths.events_csv, EVENTS_HEADER)?;
        let control = dir.join(MARK_CONTROL_FILE);
        File::create(&control).map_err(|e| not_writable(&control, e))?;

        let meta = SessionMeta {
            schema_version: SCHEMA_VERSION,
            start_wall_utc: wall_now(),
            stop_wall_utc: None,
            period_s: config.period_s,
            device_index: device.index,
            device_name: device.name.clone(),
            device_mem_total_bytes: device.memory_total,
            duration_ms: None,
            child_exit_status: None,
            diagnostics: Vec::new(),
            extra: Vec::new(),
        };
        fs::write(&paths.meta_file, encode_meta(&meta))
            .map_err(|e| not_writable(&paths.meta_file, e))?;

        let t0 = clock.now();
        let shared = Arc::new(Shared {
            clock: clock.clone(),
            t0,
            events: Mutex::new(Some(events)),
            diagnostics: Mutex::new(Vec::new()),
        });

        // The first sample is taken synchronously so even an immediately
        // stopped session has data.
        let first = take_sample(&*backend, &shared, device.index, 0);
        metrics.write_all(encode_sample(&first).as_bytes())?;

        let period = Duration::from_secs_f64(config.period_s);
        let poller = {
            let stop = Arc::new(StopSignal::new());
            let (shared, stop2, backend) = (shared.clone(), stop.clone(), backend.clone());
            let index = device.index;
            clock.attach();
            let handle = thread::Builder::new()
                .name("gputrace-poller".into())
                .spawn(move || {
                    poll_loop(&*backend, &shared, index, period, &mut metrics, &stop2);
                    shared.clock.detach();
                })?;
            Worker { stop, handle }
        };

        let tailer = if config.watch_mark_file {
            let stop = Arc::new(StopSignal::new());
            let (shared, stop2) = (shared.clone(), stop.clone());
            let handle = thread::Builder::new()
                .name("gputrace-marks".into())
                .spawn(move || tail_marks(&control, &shared, &stop2))?;
            Some(Worker { stop, handle })
        } else {
            None
        };

        debug!("sampler started in {}", dir.display());
        Ok(Self {
            shared,
            dir,
            state: Mutex::new(State::Running(Box::new(Running {
                poller,
                tailer,
                procmon: None,
                meta,
            }))),
            child_exit_status: Mutex::new(None),
        })
    }

    pub fn session_dir(&self) -> &Path {
        &self.dir
    }

    pub fn mark_file(&self) -> PathBuf {
        self.dir.join(MARK_CONTROL_FILE)
    }

    /// Elapsed milliseconds since start on the sampler's clock.
    pub fn elapsed_ms(&self) -> u64 {
        self.shared.elapsed_ms()
    }

    /// Appends a marker stamped with the time of this call.
    pub fn mark(&self, label: &str) -> Result<(), SamplerError> {
        self.shared.mark(label)
    }

    /// Starts recording CPU% and RSS of `pid` into `process.csv` at the
    /// sampler's period.
    pub fn attach_process(&self, pid: u32) -> Result<(), SamplerError> {
        let mut state = self.state.lock().unwrap();
        let State::Running(running) = &mut *state else {
            return Err(SamplerError::SamplerStopped);
        };
        if running.procmon.is_some() {
            return Err(SamplerError::InvalidConfig(
                "a process is already being monitored".into(),
            ));
        }
        let path = self.dir.join(crate::schema::PROCESS_FILE);
        let mut file = create_with_header(&path, PROCESS_HEADER)?;
        let period = Duration::from_secs_f64(running.meta.period_s);
        let stop = Arc::new(StopSignal::new());
        let (shared, stop2) = (self.shared.clone(), stop.clone());
        let handle = thread::Builder::new()
            .name("gputrace-procmon".into())
            .spawn(move || {
                let clock = shared.clock.clone();
                let result = monitor_process(pid, period, &*clock, shared.t0, &stop2, |s| {
                    if let Err(e) = file.write_all(encode_proc(s).as_bytes()) {
                        shared.diagnostic(format!("process.csv write failed: {e}"));
                    }
                });
                if let Err(e) = result {
                    shared.diagnostic(format!("process monitor: {e}"));
                }
            })?;
        running.procmon = Some(Worker { stop, handle });
        Ok(())
    }

    /// Records the exit status of a wrapped command in the meta file.
    pub fn record_exit_status(&self, code: i32) {
        *self.child_exit_status.lock().unwrap() = Some(code);
    }

    /// Stops sampling and returns the session's file paths. Calling it again
    /// returns the same paths.
    pub fn stop(&self) -> TracePaths {
        let mut state = self.state.lock().unwrap();
        let running = match std::mem::replace(
            &mut *state,
            State::Stopped(TracePaths::in_dir(&self.dir, false)),
        ) {
            State::Stopped(paths) => {
                *state = State::Stopped(paths.clone());
                return paths;
            }
            State::Running(r) => *r,
        };
        let clock = &*self.shared.clock;

        // Drain pending control-file labels before marker intake closes.
        if let Some(t) = running.tailer {
            t.finish(clock);
        }
        if let Some(mut f) = self.shared.events.lock().unwrap().take() {
            if let Err(e) = f.flush() {
                self.shared
                    .diagnostic(format!("events.csv flush failed: {e}"));
            }
        }
        running.poller.finish(clock);
        let with_process = running.procmon.is_some();
        if let Some(p) = running.procmon {
            p.finish(clock);
        }

        let mut meta = running.meta;
        meta.stop_wall_utc = Some(wall_now());
        meta.duration_ms = Some(self.shared.elapsed_ms());
        meta.child_exit_status = *self.child_exit_status.lock().unwrap();
        meta.diagnostics = self.shared.diagnostics.lock().unwrap().clone();
        let paths = TracePaths::in_dir(&self.dir, with_process);
        if let Err(e) = fs::write(&paths.meta_file, encode_meta(&meta)) {
            warn!("failed to finalize {}: {e}", paths.meta_file.display());
        }
        debug!("sampler stopped after {:?} ms", meta.duration_ms);
        *state = State::Stopped(paths.clone());
        paths
    }
}

impl Drop for Sampler {
    fn drop(&mut self) {
        if matches!(*self.state.lock().unwrap(), State::Running(_)) {
            self.stop();
        }
    }
}

fn take_sample(
    backend: &dyn DeviceBackend,
    shared: &Shared,
    index: u32,
    elapsed_ms: u64,
) -> Sample {
    match backend.read_instant(index) {
        Ok(r) => Sample::from_reading(elapsed_ms, index, &r),
        Err(e) => {
            shared.diagnostic(format!("read failed at {elapsed_ms} ms: {e}"));
            Sample::gap(elapsed_ms, index)
        }
    }
}

fn poll_loop(
    backend: &dyn DeviceBackend,
    shared: &Shared,
    index: u32,
    period: Duration,
    metrics: &mut File,
    stop: &StopSignal,
) {
    let clock = &*shared.clock;
    let mut last_ms = 0u64;
    let mut k: u32 = 1;
    loop {
        if !clock.sleep_until(shared.t0 + period * k, stop) {
            break;
        }
        let since = clock.now().saturating_sub(shared.t0);
        let ms = as_millis(since);
        if ms > last_ms {
            let row = take_sample(backend, shared, index, ms);
            if let Err(e) = metrics.write_all(encode_sample(&row).as_bytes()) {
                shared.diagnostic(format!("metrics.csv write failed: {e}"));
            }
            last_ms = ms;
        }
        // A late tick resumes on the original grid at the next point after now.
        let next = (since.as_nanos() / period.as_nanos()) as u32 + 1;
        k = next.max(k + 1);
    }
    if let Err(e) = metrics.flush() {
        shared.diagnostic(format!("metrics.csv flush failed: {e}"));
    }
}

/// Reads complete lines appended to the control file since `offset`.
fn drain_marks(path: &Path, offset: &mut u64, shared: &Shared) {
    let Ok(mut f) = File::open(path) else {
        return;
    };
    if f.seek(SeekFrom::Start(*offset)).is_err() {
        return;
    }
    let mut buf = Vec::new();
    if f.read_to_end(&mut buf).is_err() {
        return;
    }
    let Some(end) = buf.iter().rposition(|&b| b == b'\n') else {
        return;
    };
    *offset += end as u64 + 1;
    for line in buf[..end].split(|&b| b == b'\n') {
        let label = String::from_utf8_lossy(line);
        let label = label.trim_end_matches('\r');
        if label.is_empty() {
            continue;
        }
        if let Err(e) = shared.mark(label) {
            shared.diagnostic(format!("control-file marker `{label}` rejected: {e}"));
        }
    }
}

fn tail_marks(path: &Path, shared: &Shared, stop: &StopSignal) {
    let mut offset = 0;
    loop {
        drain_marks(path, &mut offset, shared);
        if stop.wait_timeout(MARK_POLL) {
            break;
        }
    }
    drain_marks(path, &mut offset, shared);
}

/// Appends one label to a control file. This is what `gputrace mark` does.
pub fn append_mark(control_file: &Path, label: &str) -> Result<(), SamplerError> {
    validate_label(label)?;
    if label.contains(['\n', '\r']) {
        return Err(SamplerError::InvalidLabel(
            "labels sent through the control file cannot contain line breaks".into(),
        ));
    }
    let mut f = OpenOptions::new().append(true).open(control_file)?;
    // One write per line keeps concurrent appends whole.
    f.write_all(format!("{label}\n").as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RecordOutcome {
    pub paths: TracePaths,
    /// Exit code, or 128 + signal number when the child was killed.
    pub exit_status: i32,
}

/// Runs `argv` under a sampler and stops sampling when it exits.
///
/// The child sees `GPUTRACE_SESSION_DIR` and `GPUTRACE_MARK_FILE`. When
/// `monitor_child` is set its CPU% and RSS go to `process.csv`. A nonzero
/// exit is recorded in the meta file, not returned as an error.
pub fn record_command(
    config: SamplerConfig,
    argv: &[String],
    monitor_child: bool,
    backend: Arc<dyn DeviceBackend>,
    clock: Arc<dyn Clock>,
) -> Result<RecordOutcome, SamplerError> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| SamplerError::InvalidConfig("no command given".into()))?;
    let sampler = Sampler::start(config, backend, clock)?;
    let mut child = match Command::new(program)
        .args(args)
        .env(ENV_SESSION_DIR, sampler.session_dir())
        .env(ENV_MARK_FILE, sampler.mark_file())
        .spawn()
    {
        Ok(c) => c,
        Err(e) => {
            sampler
                .shared
                .diagnostic(format!("failed to spawn `{program}`: {e}"));
            sampler.stop();
            return Err(SamplerError::SpawnFailure {
                command: program.clone(),
                reason: e.to_string(),
            });
        }
    };
    if monitor_child {
        if let Err(e) = sampler.attach_process(child.id()) {
            sampler
                .shared
                .diagnostic(format!("process monitor not started: {e}"));
        }
    }
    let status = child.wait()?;
    let code = exit_code(&status);
    sampler.record_exit_status(code);
    let paths = sampler.stop();
    Ok(RecordOutcome {
        paths,
        exit_status: code,
    })
}

#[cfg(unix)]
fn exit_code(status: &std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

#[cfg(not(unix))]
fn exit_code(status: &std::process::ExitStatus) -> i32 {
    status.code().unwrap_or(-1)
}
