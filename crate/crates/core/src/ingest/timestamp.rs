use chrono::{DateTime, NaiveDateTime};

use super::UnixSeconds;

/// How a timestamp column is encoded. Detected once per column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestampFormat {
    EpochSeconds,
    Iso8601,
}

impl TimestampFormat {
    /// Numeric values are epoch seconds, anything else is treated as ISO-8601.
    pub fn detect(sample: &str) -> Self {
        if sample.trim().parse::<f64>().is_ok() {
            TimestampFormat::EpochSeconds
        } else {
            TimestampFormat::Iso8601
        }
    }
}

const NAIVE_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%d %H:%M:%S%.f",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

/// Parses one timestamp. Fractional epoch values are rounded to the nearest
/// second; ISO-8601 values without an offset are taken as UTC.
pub fn parse_timestamp(value: &str, format: TimestampFormat) -> Option<UnixSeconds> {
    let value = value.trim();
    match format {
        TimestampFormat::EpochSeconds => {
            if let Ok(secs) = value.parse::<i64>() {
                return Some(secs);
            }
            let secs = value.parse::<f64>().ok()?;
            (secs.is_finite() && secs.abs() < 1e15).then(|| secs.round() as i64)
        }
        TimestampFormat::Iso8601 => {
            if let Ok(dt) = DateTime::parse_from_rfc3339(value) {
                return Some(dt.timestamp());
            }
            NAIVE_FORMATS
                .iter()
                .find_map(|f| NaiveDateTime::parse_from_str(value, f).ok())
                .map(|dt| dt.and_utc().timestamp())
        }
    }
}
