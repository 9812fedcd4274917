//! Ratios, memory headroom, and linear scaling fits.

use std::fmt;

use thiserror::Error;

use crate::trace::Session;
use crate::units::bytes_to_gb;

/// Sizes are fitted in units of this many cells to keep sums well scaled.
pub const FIT_SIZE_UNIT: f64 = 100_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("all points share the same size; slope is undefined")]
    DegenerateInput,
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("inputs must be positive (got {0} and {1})")]
    NonPositiveInput(f64, f64),
    #[error("peak {peak} exceeds capacity {capacity}")]
    PeakExceedsCapacity { peak: u64, capacity: u64 },
    #[error("bad scaling csv at line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingPoint {
    pub size: f64,
    pub value: f64,
}

impl ScalingPoint {
    pub fn new(size: f64, value: f64) -> Result<Self, AnalysisError> {
        if !(size.is_finite() && size > 0.0) {
            return Err(AnalysisError::InvalidPoint(format!(
                "size {size} must be positive"
            )));
        }
        if !value.is_finite() {
            return Err(AnalysisError::InvalidPoint(format!(
                "value {value} is not finite"
            )));
        }
        Ok(Self { size, value })
    }
}

/// Least-squares line `value = intercept + slope * size`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFit {
    /// Value per unit of size (per cell).
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n: usize,
    pub min_size: f64,
    pub max_size: f64,
}

impl ScalingFit {
    pub fn slope_per_100k(&self) -> f64 {
        unit_cost(self, FIT_SIZE_UNIT)
    }
}

impl fmt::Display for ScalingFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "y = {} + {} * x (r2 = {:.6}, n = {})",
            self.intercept, self.slope, self.r2, self.n
        )
    }
}

/// Ordinary least squares over the points.
///
/// When every value is identical the slope is 0 and `r2` is 1.
pub fn fit_linear(points: &[ScalingPoint]) -> Result<ScalingFit, AnalysisError> {
    if points.len() < 2 {
        return Err(AnalysisError::TooFewPoints(points.len()));
    }
    for p in points {
        ScalingPoint::new(p.size, p.value)?;
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.size / FIT_SIZE_UNIT).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.value).collect();
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;

    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let (dx, dy) = (x - x_mean, y - y_mean);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(AnalysisError::DegenerateInput);
    }
    let slope_scaled = sxy / sxx;
    let intercept = y_mean - slope_scaled * x_mean;

    let r2 = if syy == 0.0 {
        1.0
    } else {
        let ss_res: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| {
                let r = y - (intercept + slope_scaled * x);
                r * r
            })
            .sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };

    let (min_size, max_size) = points.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), p| {
        (lo.min(p.size), hi.max(p.size))
    });
    Ok(ScalingFit {
        slope: slope_scaled / FIT_SIZE_UNIT,
        intercept,
        r2,
        n: points.len(),
        min_size,
        max_size,
    })
}

/// Fitted cost of `unit` more size, e.g. seconds per 100k cells.
pub fn unit_cost(fit: &ScalingFit, unit: f64) -> f64 {
    fit.slope * unit
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrapolation {
    pub size: f64,
    pub value: f64,
    /// The size lies outside the range the line was fitted on.
    pub extrapolated: bool,
}

pub fn extrapolate(fit: &ScalingFit, size: f64) -> Extrapolation {
    Extrapolation {
        size,
        value: fit.intercept + fit.slope * size,
        extrapolated: size > fit.max_size || size < fit.min_size,
    }
}

/// Size at which the fitted line reaches `threshold`, if it ever rises to it.
pub fn threshold_crossing(fit: &ScalingFit, threshold: f64) -> Option<f64> {
    if fit.intercept >= threshold {
        return Some(0.0);
    }
    (fit.slope > 0.0).then(|| (threshold - fit.intercept) / fit.slope)
}

/// `baseline / accelerated`.
pub fn speedup(total_baseline_s: f64, total_accelerated_s: f64) -> Result<f64, AnalysisError> {
    ratio(total_baseline_s, total_accelerated_s)
}

/// Growth factor from `first` to `last`, e.g. runtime at 1M over runtime at 100k.
pub fn growth(first: f64, last: f64) -> Result<f64, AnalysisError> {
    ratio(last, first)
}

fn ratio(num: f64, den: f64) -> Result<f64, AnalysisError> {
    if !(num > 0.0 && den > 0.0 && num.is_finite() && den.is_finite()) {
        return Err(AnalysisError::NonPositiveInput(num, den));
    }
    Ok(num / den)
}

/// Fraction of `capacity_bytes` used at `peak_bytes`.
pub fn headroom(peak_bytes: u64, capacity_bytes: u64) -> Result<f64, AnalysisError> {
    if capacity_bytes == 0 {
        return Err(AnalysisError::NonPositiveInput(peak_bytes as f64, 0.0));
    }
    if peak_bytes > capacity_bytes {
        return Err(AnalysisError::PeakExceedsCapacity {
            peak: peak_bytes,
            capacity: capacity_bytes,
        });
    }
    Ok(peak_bytes as f64 / capacity_bytes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingMetric {
    /// Seconds.
    Runtime,
    /// Binary gigabytes.
    PeakGpuMem,
}

impl ScalingMetric {
    pub fn name(self) -> &'static str {
        match self {
            ScalingMetric::Runtime => "runtime",
            ScalingMetric::PeakGpuMem => "peak_gpu_mem",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            ScalingMetric::Runtime => "s",
            ScalingMetric::PeakGpuMem => "GB",
        }
    }

    /// The metric's value for one session: total duration in seconds, or the
    /// largest GPU memory reading in GB.
    pub fn of_session(self, session: &Session) -> Option<f64> {
        match self {
            ScalingMetric::Runtime => Some(session.duration_ms as f64 / 1000.0),
            ScalingMetric::PeakGpuMem => session.peak_gpu_mem().map(bytes_to_gb),
        }
    }
}

impl std::str::FromStr for ScalingMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "runtime" => Ok(ScalingMetric::Runtime),
            "peak_gpu_mem" => Ok(ScalingMetric::PeakGpuMem),
            other => Err(format!("unknown metric `{other}` (runtime|peak_gpu_mem)")),
        }
    }
}

/// Reads `size,value` CSV (with that header) into points.
pub fn read_points_csv(text: &str) -> Result<Vec<ScalingPoint>, AnalysisError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == "size,value" => {}
        Some((i, header)) => {
            return Err(AnalysisError::Csv {
                line: i + 1,
                reason: format!("expected header `size,value`, found `{header}`"),
            })
        }
        None => return Ok(Vec::new()),
    }
    lines
        .map(|(i, line)| {
            let err = |reason: String| AnalysisError::Csv {
                line: i + 1,
                reason,
            };
            let (size, value) = line
                .split_once(',')
                .ok_or_else(|| err("expected two fields".into()))?;
            let size: f64 = size
                .trim()
                .parse()
                .map_err(|_| err(format!("bad size `{size}`")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| err(format!("bad value `{value}`")))?;
            ScalingPoint::new(size, value).map_err(|e| err(e.to_string()))
        })
        .collect()
}
