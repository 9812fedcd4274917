//! Byte/GB conversions used by every display layer.
//!
//! Memory is carried as exact bytes everywhere. "GB" in labels, profile files
//! and tables means binary gibibytes (2^30 bytes).

pub const BYTES_PER_GB: u64 = 1 << 30;
pub const BYTES_PER_MB: u64 = 1 << 20;
pub const BYTES_PER_KB: u64 = 1 << 10;

/// Converts a GB figure to bytes, rounding to the nearest byte.
pub fn gb_to_bytes(gb: f64) -> u64 {
    (gb * BYTES_PER_GB as f64).round() as u64
}

pub fn bytes_to_gb(bytes: u64) -> f64 {
    bytes as f64 / BYTES_PER_GB as f64
}

/// Formats bytes as GB with one decimal, e.g. `101.3`.
pub fn format_gb(bytes: u64) -> String {
    format!("{:.1}", bytes_to_gb(bytes))
}

/// Formats a ratio the way reports print them, e.g. `30.7x`.
pub fn format_ratio(ratio: f64) -> String {
    format!("{ratio:.1}x")
}

/// Formats a fraction as a percentage with one decimal, e.g. `72.4%`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.1}%", fraction * 100.0)
}
