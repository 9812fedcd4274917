//! SVG usage timelines, scaling charts and step tables.

pub mod plot;

use thiserror::Error;

use crate::analysis::{AnalysisError, ScalingFit, ScalingMetric, ScalingPoint};
use crate::trace::{steps_csv, total_runtime_ms, Session, Step, StepSummary};
use crate::units::{bytes_to_gb, BYTES_PER_GB};

pub use plot::{
    render_plot, Axis, Band, FitLine, PlotSpec, Series, Side, Style, TickFormat, VLine,
};

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("session has no samples to plot")]
    EmptySession,
    #[error("invalid plot: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

pub const GPU_UTIL_SERIES: &str = "GPU utilization (%)";
pub const GPU_MEM_SERIES: &str = "GPU memory (GB)";
pub const CPU_SERIES: &str = "CPU (%)";
pub const CPU_CLIPPED_SERIES: &str = "CPU (%, clipped at 100)";
pub const RSS_SERIES: &str = "RSS (GB)";

/// Upper end of the memory axis: the next multiple of 10 GB at or above
/// `max_bytes`, and never below 10 GB.
pub fn memory_axis_max_gb(max_bytes: u64) -> f64 {
    let gb = max_bytes as f64 / BYTES_PER_GB as f64;
    ((gb / 10.0).ceil() * 10.0).max(10.0)
}

/// Builds the usage timeline: utilization on the left axis, memory on the
/// right, one dashed line per marker and a shaded band per step.
pub fn usage_spec(session: &Session, steps: &[Step]) -> Result<PlotSpec, ReportError> {
    if session.samples.is_empty() {
        return Err(ReportError::EmptySession);
    }
    let secs = |ms: u64| ms as f64 / 1000.0;
    let mut spec = PlotSpec::new(format!("Resource usage: {}", session.device.name));
    spec.x_label = "Elapsed time (s)".into();
    spec.left_label = "Utilization (%)".into();
    spec.right_label = Some("Memory (GB)".into());
    spec.x_range = (0.0, secs(session.duration_ms.max(1)));
    spec.left_range = (0.0, 100.0);

    let peak_rss = session.peak_cpu_mem().unwrap_or(0);
    let peak = session.peak_gpu_mem().unwrap_or(0).max(peak_rss);
    spec.right_range = Some((0.0, memory_axis_max_gb(peak)));

    let point = |ms: u64, v: Option<f64>| v.map(|v| (secs(ms), v));
    spec.series.push(Series {
        name: GPU_UTIL_SERIES.into(),
        side: Side::Left,
        style: Style::Line,
        color: "#1f77b4".into(),
        points: session
            .samples
            .iter()
            .map(|s| point(s.elapsed_ms, s.gpu_util_pct.map(f64::from)))
            .collect(),
    });
    spec.series.push(Series {
        name: GPU_MEM_SERIES.into(),
        side: Side::Right,
        style: Style::Line,
        color: "#d62728".into(),
        points: session
            .samples
            .iter()
            .map(|s| point(s.elapsed_ms, s.mem_used_bytes.map(bytes_to_gb)))
            .collect(),
    });
    if let Some(process) = session.process.as_ref().filter(|p| !p.is_empty()) {
        let clipped = process.iter().any(|p| p.cpu_pct > 100.0);
        spec.series.push(Series {
            name: if clipped {
                CPU_CLIPPED_SERIES
            } else {
                CPU_SERIES
            }
            .into(),
            side: Side::Left,
            style: Style::Line,
            color: "#2ca02c".into(),
            points: process
                .iter()
                .map(|p| Some((secs(p.elapsed_ms), p.cpu_pct.min(100.0))))
                .collect(),
        });
        spec.series.push(Series {
            name: RSS_SERIES.into(),
            side: Side::Right,
            style: Style::Line,
            color: "#9467bd".into(),
            points: process
                .iter()
                .map(|p| Some((secs(p.elapsed_ms), bytes_to_gb(p.rss_bytes))))
                .collect(),
        });
    }
    spec.bands = steps
        .iter()
        .map(|s| Band {
            start: secs(s.start_ms),
            end: secs(s.end_ms),
            label: s.label.clone(),
        })
        .collect();
    spec.vlines = session
        .markers
        .iter()
        .map(|m| VLine {
            x: secs(m.elapsed_ms),
            label: m.label.clone(),
        })
        .collect();
    Ok(spec)
}

pub fn render_usage(session: &Session, steps: &[Step]) -> Result<String, ReportError> {
    render_plot(&usage_spec(session, steps)?)
}

/// `100000` -> `100k`, `1000000` -> `1M`.
pub fn unit_label(unit: f64) -> String {
    let trim = |v: f64| {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    };
    if unit >= 1e6 {
        format!("{}M", trim(unit / 1e6))
    } else if unit >= 1e3 {
        format!("{}k", trim(unit / 1e3))
    } else {
        trim(unit)
    }
}

/// Text under the chart title, e.g. `10.1 GB per 100k cells (r2 = 1.0000)`.
pub fn slope_annotation(fit: &ScalingFit, metric: ScalingMetric, unit: f64) -> String {
    format!(
        "{:.1} {} per {} cells (r2 = {:.4})",
        fit.slope * unit,
        metric.unit(),
        unit_label(unit),
        fit.r2
    )
}

/// Scatter of the measurements, the fitted line over their size range, and
/// the unit cost per `unit` cells.
pub fn scaling_spec(
    points: &[ScalingPoint],
    fit: &ScalingFit,
    metric: ScalingMetric,
    unit: f64,
) -> Result<PlotSpec, ReportError> {
    if points.len() < 2 {
        return Err(AnalysisError::TooFewPoints(points.len()).into());
    }
    let (label, title) = match metric {
        ScalingMetric::Runtime => ("Runtime (s)", "Runtime scaling"),
        ScalingMetric::PeakGpuMem => ("Peak GPU memory (GB)", "GPU memory scaling"),
    };
    let max_size = points.iter().map(|p| p.size).fold(0.0, f64::max);
    let min_size = points.iter().map(|p| p.size).fold(f64::INFINITY, f64::min);
    let at = |x: f64| fit.intercept + fit.slope * x;
    let values = points
        .iter()
        .map(|p| p.value)
        .chain([at(min_size), at(max_size)]);
    let (lo, hi) = values.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));

    let mut spec = PlotSpec::new(title);
    spec.x_label = "Cells".into();
    spec.left_label = label.into();
    spec.x_ticks = TickFormat::Compact;
    spec.x_range = (0.0, plot::nice_upper(max_size * 1.05));
    spec.left_range = (
        if lo < 0.0 {
            -plot::nice_upper(-lo * 1.1)
        } else {
            0.0
        },
        plot::nice_upper(hi * 1.1),
    );
    spec.series.push(Series {
        name: label.into(),
        side: Side::Left,
        style: Style::Points,
        color: "#1f77b4".into(),
        points: points.iter().map(|p| Some((p.size, p.value))).collect(),
    });
    spec.fit_line = Some(FitLine {
        slope: fit.slope,
        intercept: fit.intercept,
        x_from: min_size,
        x_to: max_size,
    });
    spec.annotation = Some(slope_annotation(fit, metric, unit));
    Ok(spec)
}

pub fn render_scaling(
    points: &[ScalingPoint],
    fit: &ScalingFit,
    metric: ScalingMetric,
    unit: f64,
) -> Result<String, ReportError> {
    render_plot(&scaling_spec(points, fit, metric, unit)?)
}

fn seconds(ms: u64) -> String {
    if ms.is_multiple_of(1000) {
        (ms / 1000).to_string()
    } else {
        format!("{:.3}", ms as f64 / 1000.0)
    }
}

/// Fixed-width step table ending in a Total row.
pub fn render_table(rows: &[StepSummary]) -> String {
    let gb = |b: Option<u64>| b.map_or("-".to_string(), |b| format!("{:.1}", bytes_to_gb(b)));
    let header = [
        "Step",
        "Runtime (s)",
        "GPU Mem (GB)",
        "CPU Mem (GB)",
        "GPU Util (%)",
    ];
    let mut body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                seconds(r.end_ms - r.start_ms),
                gb(r.peak_gpu_mem_bytes),
                gb(r.peak_cpu_mem_bytes),
                r.mean_gpu_util_pct
                    .map_or("-".to_string(), |u| format!("{u:.1}")),
            ]
        })
        .collect();
    body.push([
        "Total".into(),
        seconds(total_runtime_ms(rows)),
        String::new(),
        String::new(),
        String::new(),
    ]);

    let mut widths = header.map(|h| h.chars().count());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = format!("{:<w$}", cells[0], w = widths[0]);
        for (cell, w) in cells[1..].iter().zip(&widths[1..]) {
            s.push_str(&format!("  {cell:>w$}"));
        }
        s.trim_end().to_string() + "\n"
    };
    let rule = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    let mut out = line(&header.map(String::from));
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    let (total, steps) = body.split_last().expect("total row");
    for row in steps {
        out.push_str(&line(row));
    }
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    out.push_str(&line(total));
    out
}

/// Machine-readable counterpart of [`render_table`].
pub fn table_csv(rows: &[StepSummary]) -> String {
    steps_csv(rows)
}
