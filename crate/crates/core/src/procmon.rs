//! CPU-side monitoring of one process.
//!
//! Two sources produce the same [`ProcSample`] series: logs written by
//! `top -p PID -b -d 1` (see [`parse_top_batch`]) and direct polling of
//! `/proc/<pid>` (see [`sample_process`]). Memory is resident set size.

use std::time::Duration;

use thiserror::Error;

use crate::clock::{as_millis, Clock, StopSignal, SystemClock};
use crate::units::{BYTES_PER_GB, BYTES_PER_KB, BYTES_PER_MB};

#[derive(Debug, Error)]
pub enum ProcmonError {
    #[error("no such process: {0}")]
    NoSuchProcess(u32),
    #[error("invalid sampling period {0} s")]
    InvalidPeriod(f64),
    #[error("process sampling is only supported on Linux")]
    Unsupported,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcSample {
    pub elapsed_ms: u64,
    /// Percent of one core; above 100 on multicore use.
    pub cpu_pct: f64,
    pub rss_bytes: u64,
}

impl ProcSample {
    pub fn elapsed_s(&self) -> f64 {
        self.elapsed_ms as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopParse {
    pub samples: Vec<ProcSample>,
    /// Snapshots seen, including skipped ones.
    pub snapshots: usize,
    /// Snapshots skipped because the target row was missing or unparseable.
    pub malformed: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TopOptions {
    /// Seconds between snapshots (`top -d`).
    pub interval_s: f64,
    /// Row to extract; the first process row when `None`.
    pub pid: Option<u32>,
}

impl Default for TopOptions {
    fn default() -> Self {
        Self {
            interval_s: 1.0,
            pid: None,
        }
    }
}

/// Parses a `top` memory column such as `1.5g`, `1536m` or `1572864` (KiB).
pub fn parse_top_memory(field: &str) -> Option<u64> {
    let field = field.trim();
    let (number, multiplier) = match field.chars().last()?.to_ascii_lowercase() {
        'k' => (&field[..field.len() - 1], BYTES_PER_KB),
        'm' => (&field[..field.len() - 1], BYTES_PER_MB),
        'g' => (&field[..field.len() - 1], BYTES_PER_GB),
        't' => (&field[..field.len() - 1], BYTES_PER_GB << 10),
        'p' => (&field[..field.len() - 1], BYTES_PER_GB << 20),
        _ => (field, BYTES_PER_KB),
    };
    let value: f64 = number.replace(',', ".").parse().ok()?;
    if !(value.is_finite() && value >= 0.0) {
        return None;
    }
    Some((value * multiplier as f64).round() as u64)
}

struct Columns {
    count: usize,
    pid: usize,
    cpu: usize,
    res: usize,
}

fn header_columns(line: &str) -> Option<Columns> {
    let names: Vec<&str> = line.split_whitespace().collect();
    if names.first() != Some(&"PID") {
        return None;
    }
    let find = |n: &str| names.iter().position(|c| *c == n);
    Some(Columns {
        count: names.len(),
        pid: 0,
        cpu: find("%CPU")?,
        res: find("RES")?,
    })
}

fn parse_snapshot(lines: &[&str], pid: Option<u32>) -> Option<(f64, u64)> {
    let header_at = lines.iter().position(|l| header_columns(l).is_some())?;
    let cols = header_columns(lines[header_at])?;
    let row = lines[header_at + 1..]
        .iter()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .find(|t| match pid {
            Some(pid) => t[cols.pid].parse::<u32>().ok() == Some(pid),
            None => true,
        })?;
    // COMMAND may contain spaces, so only require the leading columns.
    if row.len() < cols.count.min(cols.cpu.max(cols.res) + 1) {
        return None;
    }
    let cpu: f64 = row[cols.cpu].replace(',', ".").parse().ok()?;
    if !(cpu.is_finite() && cpu >= 0.0) {
        return None;
    }
    let rss = parse_top_memory(row[cols.res])?;
    Some((cpu, rss))
}

/// Parses concatenated `top` batch snapshots into a per-snapshot series.
///
/// A snapshot starts at each line beginning with `top - `. Sample `k` is
/// stamped `k * interval_s`, counting skipped snapshots too.
pub fn parse_top_batch(text: &str, opts: TopOptions) -> TopParse {
    let mut snapshots: Vec<Vec<&str>> = Vec::new();
    for line in text.lines() {
        if line.starts_with("top - ") {
            snapshots.push(Vec::new());
        } else if let Some(current) = snapshots.last_mut() {
            current.push(line);
        }
    }

    let mut samples = Vec::new();
    let mut malformed = 0;
    for (ordinal, lines) in snapshots.iter().enumerate() {
        match parse_snapshot(lines, opts.pid) {
            Some((cpu_pct, rss_bytes)) => samples.push(ProcSample {
                elapsed_ms: (ordinal as f64 * opts.interval_s * 1000.0).round() as u64,
                cpu_pct,
                rss_bytes,
            }),
            None => malformed += 1,
        }
    }
    TopParse {
        samples,
        snapshots: snapshots.len(),
        malformed,
    }
}

/// Maximum RSS over the series; 0 when empty.
pub fn peak_rss(series: &[ProcSample]) -> u64 {
    series.iter().map(|s| s.rss_bytes).max().unwrap_or(0)
}

/// Renders a series in the `process.csv` format.
pub fn process_csv(series: &[ProcSample]) -> String {
    let mut out = format!("{}\n", crate::schema::PROCESS_HEADER);
    for s in series {
        out.push_str(&crate::schema::encode_proc(s));
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ProcStat {
    cpu_ticks: u64,
    rss_bytes: u64,
}

#[cfg(target_os = "linux")]
fn read_proc_stat(pid: u32) -> Option<ProcStat> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // The command name may contain spaces and parentheses; fields resume
    // after the last ')'.
    let rest = &stat[stat.rfind(')')? + 1..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let state = *fields.first()?;
    if state == "Z" || state == "X" {
        return None;
    }
    let utime: u64 = fields.get(11)?.parse().ok()?;
    let stime: u64 = fields.get(12)?.parse().ok()?;
    let statm = std::fs::read_to_string(format!("/proc/{pid}/statm")).ok()?;
    let resident: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some(ProcStat {
        cpu_ticks: utime + stime,
        rss_bytes: resident * page_size(),
    })
}

#[cfg(not(target_os = "linux"))]
fn read_proc_stat(_pid: u32) -> Option<ProcStat> {
    None
}

#[cfg(target_os = "linux")]
fn page_size() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if v > 0 {
        v as u64
    } else {
        4096
    }
}

#[cfg(target_os = "linux")]
fn clock_ticks_per_sec() -> f64 {
    // SAFETY: sysconf has no preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if v > 0 {
        v as f64
    } else {
        100.0
    }
}

#[cfg(not(target_os = "linux"))]
fn clock_ticks_per_sec() -> f64 {
    100.0
}

/// Polls `pid` every `period` until `stop` is raised or the process exits,
/// handing each sample to `sink` as it is taken.
///
/// Timestamps are `clock` time minus `origin`, so a monitor started next to
/// a sampler can share its time base. The first sample has `cpu_pct` 0; later ones are
/// CPU-time delta over wall-time delta.
pub fn monitor_process(
    pid: u32,
    period: Duration,
    clock: &dyn Clock,
    origin: Duration,
    stop: &StopSignal,
    mut sink: impl FnMut(&ProcSample),
) -> Result<usize, ProcmonError> {
    if !cfg!(target_os = "linux") {
        return Err(ProcmonError::Unsupported);
    }
    if period.is_zero() {
        return Err(ProcmonError::InvalidPeriod(0.0));
    }
    let ticks_per_sec = clock_ticks_per_sec();
    let start = clock.now();
    let mut prev = read_proc_stat(pid).ok_or(ProcmonError::NoSuchProcess(pid))?;
    let mut prev_t = start;
    sink(&ProcSample {
        elapsed_ms: as_millis(start.saturating_sub(origin)),
        cpu_pct: 0.0,
        rss_bytes: prev.rss_bytes,
    });
    let mut count = 1;
    let mut k: u32 = 1;
    loop {
        if !clock.sleep_until(start + period * k, stop) {
            break;
        }
        let Some(cur) = read_proc_stat(pid) else {
            break;
        };
        let now = clock.now();
        let wall = (now - prev_t).as_secs_f64();
        let cpu_s = cur.cpu_ticks.saturating_sub(prev.cpu_ticks) as f64 / ticks_per_sec;
        let cpu_pct = if wall > 0.0 {
            cpu_s / wall * 100.0
        } else {
            0.0
        };
        sink(&ProcSample {
            elapsed_ms: as_millis(now.saturating_sub(origin)),
            cpu_pct,
            rss_bytes: cur.rss_bytes,
        });
        count += 1;
        prev = cur;
        prev_t = now;
        // Skip grid points already in the past.
        k = (((now - start).as_secs_f64() / period.as_secs_f64()).floor() as u32 + 1).max(k + 1);
    }
    Ok(count)
}

/// Samples `pid` every `period_s` seconds until `stop` is raised or the
/// process exits. Elapsed times start at 0 at the first sample.
pub fn sample_process(
    pid: u32,
    period_s: f64,
    stop: &StopSignal,
) -> Result<Vec<ProcSample>, ProcmonError> {
    if !(period_s.is_finite() && period_s > 0.0) {
        return Err(ProcmonError::InvalidPeriod(period_s));
    }
    let clock = SystemClock::new();
    let mut out = Vec::new();
    monitor_process(
        pid,
        Duration::from_secs_f64(period_s),
        &clock,
        clock.now(),
        stop,
        |s| out.push(s.clone()),
    )?;
    Ok(out)
}
