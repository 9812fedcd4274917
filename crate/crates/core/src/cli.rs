//! The `gputrace` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 environment error (no device, no library, unwritable output).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use crate::analysis::{
    extrapolate, fit_linear, growth, headroom, read_points_csv, threshold_crossing, unit_cost,
    AnalysisError, ScalingMetric, ScalingPoint,
};
use crate::clock::{Clock, StopSignal, SystemClock};
use crate::device::{BackendError, DeviceBackend, NvmlBackend, SimBackend};
use crate::procmon::{monitor_process, parse_top_batch, process_csv, ProcmonError, TopOptions};
use crate::profile::{parse_profile, simulate_session, ProfileSpec, SimulateError};
use crate::report::{
    render_scaling, render_table, render_usage, table_csv, unit_label, ReportError,
};
use crate::sampler::{append_mark, record_command, SamplerConfig, SamplerError};
use crate::schema::{
    encode_proc, ENV_MARK_FILE, ENV_SESSION_DIR, MARK_CONTROL_FILE, PROCESS_HEADER,
};
use crate::trace::{attribute_steps, parse_session_with, summarize, ParseOptions, TraceError};
use crate::units::{bytes_to_gb, format_gb, format_percent, format_ratio};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_ENV: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "gputrace",
    version,
    about = "Trace GPU and process resource usage around workload phases"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// NVML if it loads, otherwise the simulator with a warning.
    Auto,
    Nvml,
    Sim,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a command while sampling the GPU.
    Record {
        #[arg(long, value_enum, default_value = "auto")]
        backend: BackendKind,
        /// Sampling period in seconds.
        #[arg(long, default_value_t = 1.0)]
        period: f64,
        #[arg(long, default_value_t = 0)]
        device: u32,
        /// Session directory to create; `gputrace-<UTC time>` by default.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Profile played back in real time by the sim backend.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Also record the child's CPU% and RSS.
        #[arg(long)]
        procmon: bool,
        #[arg(required = true, last = true, value_name = "CMD")]
        argv: Vec<String>,
    },
    /// Add an event marker to the session named by the environment.
    Mark { label: String },
    /// Sample one process's CPU% and RSS until it exits.
    Procmon {
        #[arg(long)]
        pid: u32,
        #[arg(long, default_value_t = 1.0)]
        period: f64,
        /// Output file; standard output when omitted or `-`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate a session directory.
    Parse {
        dir: PathBuf,
        /// Skip corrupt rows instead of failing.
        #[arg(long)]
        lenient: bool,
    },
    /// Convert `top -b` output to the process CSV format.
    ParseTop {
        /// Seconds between snapshots.
        #[arg(long, default_value_t = 1.0)]
        interval: f64,
        /// Process to extract; the first row of each snapshot when omitted.
        #[arg(long)]
        pid: Option<u32>,
        file: PathBuf,
    },
    /// Summarize a session per step and optionally plot it.
    Report {
        dir: PathBuf,
        #[arg(long)]
        steps_csv: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Text table destination; `-` for standard output.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        lenient: bool,
    },
    /// Fit a line through (size, value) points.
    Scaling {
        #[arg(long, default_value = "runtime")]
        metric: ScalingMetric,
        /// Size unit for the reported cost.
        #[arg(long, default_value_t = 100_000.0)]
        unit: f64,
        /// Size of each session directory input, in order.
        #[arg(long = "size")]
        sizes: Vec<f64>,
        /// Report the fitted value at this size; repeatable.
        #[arg(long = "extrapolate")]
        extrapolate: Vec<f64>,
        /// Report where the fit reaches this value.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Session directories or `size,value` CSV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Write a synthetic session from a profile file.
    Simulate {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        period: f64,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: m.into(),
        }
    }
    fn data(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: m.into(),
        }
    }
    fn env(m: impl Into<String>) -> Self {
        Self {
            code: EXIT_ENV,
            message: m.into(),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        let code = match &e {
            SamplerError::InvalidConfig(_)
            | SamplerError::InvalidLabel(_)
            | SamplerError::SessionExists(_) => EXIT_USAGE,
            SamplerError::Backend(BackendError::InvalidReading(_)) => EXIT_DATA,
            _ => EXIT_ENV,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<ProcmonError> for CliError {
    fn from(e: ProcmonError) -> Self {
        let code = match e {
            ProcmonError::InvalidPeriod(_) => EXIT_USAGE,
            ProcmonError::NoSuchProcess(_) => EXIT_DATA,
            ProcmonError::Unsupported => EXIT_ENV,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), CliError>;

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Io<'_> {
    fn out(&mut self, text: &str) -> CliResult {
        self.out
            .write_all(text.as_bytes())
            .map_err(|e| CliError::env(format!("cannot write to standard output: {e}")))
    }

    fn warn(&mut self, text: &str) {
        let _ = writeln!(self.err, "warning: {text}");
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    EXIT_USAGE
                }
            };
        }
    };
    let mut io = Io { out, err };
    match dispatch(cli.command, &mut io) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(io.err, "error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command, io: &mut Io) -> CliResult {
    match command {
        Command::Record {
            backend,
            period,
            device,
            out,
            profile,
            procmon,
            argv,
        } => cmd_record(
            io,
            backend,
            period,
            device,
            out.as_deref(),
            profile.as_deref(),
            procmon,
            &argv,
        ),
        Command::Mark { label } => cmd_mark(&label),
        Command::Procmon { pid, period, out } => cmd_procmon(io, pid, period, out.as_deref()),
        Command::Parse { dir, lenient } => cmd_parse(io, &dir, lenient),
        Command::ParseTop {
            interval,
            pid,
            file,
        } => cmd_parse_top(io, interval, pid, &file),
        Command::Report {
            dir,
            steps_csv,
            plot,
            table,
            lenient,
        } => cmd_report(
            io,
            &dir,
            steps_csv.as_deref(),
            plot.as_deref(),
            table.as_deref(),
            lenient,
        ),
        Command::Scaling {
            metric,
            unit,
            sizes,
            extrapolate,
            threshold,
            plot,
            inputs,
        } => cmd_scaling(
            io,
            metric,
            unit,
            &sizes,
            &extrapolate,
            threshold,
            plot.as_deref(),
            &inputs,
        ),
        Command::Simulate {
            profile,
            out,
            period,
        } => cmd_simulate(io, &profile, &out, period),
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents)
        .map_err(|e| CliError::env(format!("cannot write {}: {e}", path.display())))
}

fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))
}

fn load_profile(path: &Path) -> Result<ProfileSpec, CliError> {
    parse_profile(&read_input(path)?)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn select_backend(
    io: &mut Io,
    kind: BackendKind,
    profile: Option<&Path>,
    clock: Arc<dyn Clock>,
) -> Result<Arc<dyn DeviceBackend>, CliError> {
    let sim = || -> Result<Arc<dyn DeviceBackend>, CliError> {
        Ok(match profile {
            Some(p) => Arc::new(SimBackend::new(load_profile(p)?.profile, clock.clone())),
            None => Arc::new(SimBackend::idle(clock.clone())),
        })
    };
    match kind {
        BackendKind::Sim => sim(),
        BackendKind::Nvml => {
            let nvml = NvmlBackend::new();
            nvml.probe().map_err(|e| CliError::env(e.to_string()))?;
            Ok(Arc::new(nvml))
        }
        BackendKind::Auto => {
            let nvml = NvmlBackend::new();
            match nvml.probe() {
                Ok(()) => Ok(Arc::new(nvml)),
                Err(e) => {
                    io.warn(&format!("{e}; falling back to the simulated backend"));
                    sim()
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_record(
    io: &mut Io,
    backend: BackendKind,
    period: f64,
    device: u32,
    out: Option<&Path>,
    profile: Option<&Path>,
    procmon: bool,
    argv: &[String],
) -> CliResult {
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| {
        PathBuf::from(format!(
            "gputrace-{}",
            chrono::Utc::now().format("%Y%m%dT%H%M%SZ")
        ))
    });
    let config = SamplerConfig::new(out).period(period).device(device);
    config.validate()?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
    let backend = select_backend(io, backend, profile, clock.clone())?;
    let outcome = record_command(config, argv, procmon, backend, clock)?;
    if outcome.exit_status != 0 {
        io.warn(&format!(
            "command exited with status {}",
            outcome.exit_status
        ));
    }
    io.out(&format!("{}\n", outcome.paths.session_dir.display()))
}

fn cmd_mark(label: &str) -> CliResult {
    let control = match (
        std::env::var_os(ENV_MARK_FILE),
        std::env::var_os(ENV_SESSION_DIR),
    ) {
        (Some(f), _) if !f.is_empty() => PathBuf::from(f),
        (_, Some(d)) if !d.is_empty() => PathBuf::from(d).join(MARK_CONTROL_FILE),
        _ => {
            return Err(CliError::usage(format!(
                "no active session: neither {ENV_MARK_FILE} nor {ENV_SESSION_DIR} is set"
            )))
        }
    };
    append_mark(&control, label).map_err(|e| match e {
        SamplerError::Io(io) => {
            CliError::env(format!("cannot append to {}: {io}", control.display()))
        }
        other => other.into(),
    })
}

fn cmd_procmon(io: &mut Io, pid: u32, period: f64, out: Option<&Path>) -> CliResult {
    if !(period.is_finite() && period > 0.0) {
        return Err(ProcmonError::InvalidPeriod(period).into());
    }
    let mut file: Box<dyn Write> = match out {
        Some(p) if p != Path::new("-") => Box::new(
            fs::File::create(p)
                .map_err(|e| CliError::env(format!("cannot create {}: {e}", p.display())))?,
        ),
        _ => Box::new(&mut *io.out),
    };
    let write_err = |e: std::io::Error| CliError::env(format!("write failed: {e}"));
    writeln!(file, "{PROCESS_HEADER}").map_err(write_err)?;
    let clock = SystemClock::new();
    let mut failed = None;
    monitor_process(
        pid,
        Duration::from_secs_f64(period),
        &clock,
        clock.now(),
        &StopSignal::new(),
        |s| {
            if failed.is_none() {
                failed = file
                    .write_all(encode_proc(s).as_bytes())
                    .and_then(|_| file.flush())
                    .err();
            }
        },
    )?;
    match failed {
        Some(e) => Err(write_err(e)),
        None => Ok(()),
    }
}

fn cmd_parse(io: &mut Io, dir: &Path, lenient: bool) -> CliResult {
    let s = parse_session_with(dir, ParseOptions { lenient })?;
    for row in &s.skipped_rows {
        io.warn(&format!("skipped {row}"));
    }
    let gaps = s.samples.iter().filter(|x| x.is_gap()).count();
    let mut text = format!(
        "session: {}\ndevice: {} ({}, {} GB)\nsamples: {} ({} gaps)\nmarkers: {}\nduration_s: {}\n",
        dir.display(),
        s.device.index,
        s.device.name,
        format_gb(s.device.memory_total),
        s.samples.len(),
        gaps,
        s.markers.len(),
        s.duration_ms as f64 / 1000.0,
    );
    if let Some(p) = &s.process {
        text.push_str(&format!("process_samples: {}\n", p.len()));
    }
    if let Some(code) = s.meta.child_exit_status {
        text.push_str(&format!("child_exit_status: {code}\n"));
    }
    text.push_str("status: ok\n");
    io.out(&text)
}

fn cmd_parse_top(io: &mut Io, interval: f64, pid: Option<u32>, file: &Path) -> CliResult {
    if !(interval.is_finite() && interval > 0.0) {
        return Err(CliError::usage(format!(
            "interval must be positive, got {interval}"
        )));
    }
    let parsed = parse_top_batch(
        &read_input(file)?,
        TopOptions {
            interval_s: interval,
            pid,
        },
    );
    let _ = writeln!(
        io.err,
        "{} snapshots, {} samples, {} skipped",
        parsed.snapshots,
        parsed.samples.len(),
        parsed.malformed
    );
    io.out(&process_csv(&parsed.samples))
}

fn cmd_report(
    io: &mut Io,
    dir: &Path,
    steps_csv: Option<&Path>,
    plot: Option<&Path>,
    table: Option<&Path>,
    lenient: bool,
) -> CliResult {
    let session = parse_session_with(dir, ParseOptions { lenient })?;
    for row in &session.skipped_rows {
        io.warn(&format!("skipped {row}"));
    }
    let attribution = attribute_steps(&session)?;
    for d in &attribution.diagnostics {
        io.warn(d);
    }
    let rows = summarize(&session, &attribution.steps);

    if let Some(path) = steps_csv {
        write_file(path, &table_csv(&rows))?;
    }
    if let Some(path) = plot {
        write_file(path, &render_usage(&session, &attribution.steps)?)?;
    }
    let stdout_table = match table {
        Some(p) if p == Path::new("-") => true,
        Some(p) => {
            write_file(p, &render_table(&rows))?;
            false
        }
        None => steps_csv.is_none() && plot.is_none(),
    };
    let mut text = String::new();
    if stdout_table {
        text.push_str(&render_table(&rows));
        text.push('\n');
    }
    let capacity = session.device.memory_total;
    if let Some(peak) = session.peak_gpu_mem() {
        let share = headroom(peak, capacity)
            .map(format_percent)
            .unwrap_or_else(|e| e.to_string());
        text.push_str(&format!(
            "Peak GPU memory: {} GB of {} GB ({share})\n",
            format_gb(peak),
            format_gb(capacity)
        ));
    }
    if let Some(peak) = session.peak_cpu_mem() {
        text.push_str(&format!("Peak CPU memory: {} GB\n", format_gb(peak)));
    }
    io.out(&text)
}

#[allow(clippy::too_many_arguments)]
fn cmd_scaling(
    io: &mut Io,
    metric: ScalingMetric,
    unit: f64,
    sizes: &[f64],
    at: &[f64],
    threshold: Option<f64>,
    plot: Option<&Path>,
    inputs: &[PathBuf],
) -> CliResult {
    if !(unit.is_finite() && unit > 0.0) {
        return Err(CliError::usage(format!(
            "--unit must be positive, got {unit}"
        )));
    }
    let dirs = inputs.iter().filter(|p| p.is_dir()).count();
    if dirs != sizes.len() {
        return Err(CliError::usage(format!(
            "{dirs} session director{} given but {} --size value{}",
            if dirs == 1 { "y" } else { "ies" },
            sizes.len(),
            if sizes.len() == 1 { "" } else { "s" }
        )));
    }
    let mut points = Vec::new();
    let mut sizes = sizes.iter();
    for input in inputs {
        if input.is_dir() {
            let size = *sizes.next().expect("counted above");
            let session = parse_session_with(input, ParseOptions::default())?;
            let value = metric.of_session(&session).ok_or_else(|| {
                CliError::data(format!("{}: no {} value", input.display(), metric.name()))
            })?;
            points
                .push(ScalingPoint::new(size, value).map_err(|e| CliError::usage(e.to_string()))?);
        } else {
            let text = read_input(input)?;
            let more = read_points_csv(&text)
                .map_err(|e| CliError::data(format!("{}: {e}", input.display())))?;
            points.extend(more);
        }
    }
    points.sort_by(|a, b| a.size.total_cmp(&b.size));
    let fit = fit_linear(&points)?;
    let u = metric.unit();
    let mut text = format!(
        "metric: {}\npoints: {}\nslope: {:.4} {u} per {} cells\nintercept: {:.4} {u}\nr2: {:.6}\n",
        metric.name(),
        fit.n,
        unit_cost(&fit, unit),
        unit_label(unit),
        fit.intercept,
        fit.r2,
    );
    let (first, last) = (points[0].value, points[points.len() - 1].value);
    if let Ok(g) = growth(first, last) {
        text.push_str(&format!(
            "growth: {} ({first} -> {last} {u})\n",
            format_ratio(g)
        ));
    }
    for &size in at {
        let e = extrapolate(&fit, size);
        text.push_str(&format!(
            "at {size}: {:.2} {u}{}\n",
            e.value,
            if e.extrapolated {
                " (extrapolated)"
            } else {
                ""
            }
        ));
    }
    if let Some(t) = threshold {
        match threshold_crossing(&fit, t) {
            Some(size) => text.push_str(&format!("reaches {t} {u} at size {size:.0}\n")),
            None => text.push_str(&format!("never reaches {t} {u}\n")),
        }
    }
    if let Some(path) = plot {
        write_file(path, &render_scaling(&points, &fit, metric, unit)?)?;
    }
    io.out(&text)
}

fn cmd_simulate(io: &mut Io, profile: &Path, out: &Path, period: f64) -> CliResult {
    SamplerConfig::new(out).period(period).validate()?;
    let spec = load_profile(profile)?;
    let paths = simulate_session(&spec, out, period).map_err(|e| match e {
        SimulateError::Sampler(s) => CliError::from(s),
        SimulateError::Io(e) => CliError::env(e.to_string()),
    })?;
    if let Some(peak) = spec.profile.segments().iter().map(|s| s.memory_used).max() {
        let _ = writeln!(
            io.err,
            "simulated {} s, peak GPU memory {:.1} GB",
            spec.duration().as_secs_f64(),
            bytes_to_gb(peak)
        );
    }
    io.out(&format!("{}\n", paths.session_dir.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("gputrace").chain(args.iter().copied());
        let code = run(argv, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn help_and_version_succeed() {
        let (code, out, _) = call(&["--help"]);
        assert_eq!(code, 0);
        assert!(out.contains("simulate") && out.contains("parse-top"));
        assert_eq!(call(&["--version"]).0, 0);
    }

    #[test]
    fn usage_errors() {
        assert_eq!(call(&[]).0, EXIT_USAGE);
        assert_eq!(call(&["bogus"]).0, EXIT_USAGE);
        assert_eq!(call(&["record", "--out", "x"]).0, EXIT_USAGE);
        assert_eq!(
            call(&["scaling", "--metric", "speed", "a.csv"]).0,
            EXIT_USAGE
        );
    }

    #[test]
    fn zero_period_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s");
        let (code, _, err) = call(&[
            "record",
            "--period",
            "0",
            "--out",
            out.to_str().unwrap(),
            "--",
            "true",
        ]);
        assert_eq!(code, EXIT_USAGE, "{err}");
        assert!(err.contains("period"));
        assert!(!out.exists());
        let (code, _, err) = call(&["record", "--period", "0", "--", "true"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(
            err.starts_with("error: invalid configuration: period"),
            "{err}"
        );
    }

    #[test]
    fn missing_session_names_file() {
        let (code, _, err) = call(&["parse", "./definitely-missing-dir"]);
        assert_eq!(code, EXIT_DATA);
        assert!(err.contains("definitely-missing-dir"), "{err}");
    }
}
