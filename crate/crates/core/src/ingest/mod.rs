//! Parsing, validation, trip segmentation and quality filtering of OBM and
//! remote-sensing input files.

mod accel;
mod parse;
mod quality;
mod timestamp;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use accel::{estimate_acceleration, AccelEstimate, AccelerationEstimator, FiniteDifference};
pub use parse::{parse_obm_file, parse_rsd_file, ObmColumns, ParseOutput, RsdColumns};
pub use quality::{
    apply_ranges, filter_trips, frozen_mask, group_by_vehicle, mark_frozen_runs, segment_trips,
    validate_record, FieldRange, ObmField, RangeTable, RejectReason, RejectedTrip, SegmentParams,
    TripCriteria, Validity, FROZEN_FIELDS,
};
pub use timestamp::{parse_timestamp, TimestampFormat};

/// UTC seconds since the UNIX epoch.
pub type UnixSeconds = i64;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input is empty (no header row)")]
    EmptyFile,
    #[error("required column `{0}` is missing from the header")]
    MissingColumn(String),
    #[error("trip has {0} records, at least 3 are needed")]
    DegenerateTrip(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One OBM telemetry row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObmRecord {
    pub vehicle_id: String,
    pub timestamp: UnixSeconds,
    /// km/h
    pub speed: f64,
    /// NOx downstream of the SCR, ppm.
    pub nox_out: f64,
    /// Intake mass air flow, kg/h.
    pub q_maf: f64,
    /// Engine fuel rate, L/h.
    pub q_fr: f64,
    pub lat: f64,
    pub lon: f64,
    pub scr_temp: Option<f64>,
    pub tank_level: Option<f64>,
    /// Conjunction of the range checks and frozen-run detection.
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EmissionStandard {
    ChinaIV,
    ChinaV,
    ChinaVI,
    Other,
}

impl EmissionStandard {
    /// Lenient parse: "China V", "ChinaV", "CN5", "V" and "5" all map to `ChinaV`.
    pub fn parse_lenient(s: &str) -> Self {
        let t: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '-' && *c != '_')
            .collect::<String>()
            .to_ascii_uppercase();
        let t = t
            .strip_prefix("CHINA")
            .or_else(|| t.strip_prefix("CN"))
            .unwrap_or(&t);
        match t {
            "IV" | "4" => EmissionStandard::ChinaIV,
            "V" | "5" => EmissionStandard::ChinaV,
            "VI" | "6" => EmissionStandard::ChinaVI,
            _ => EmissionStandard::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmissionStandard::ChinaIV => "ChinaIV",
            EmissionStandard::ChinaV => "ChinaV",
            EmissionStandard::ChinaVI => "ChinaVI",
            EmissionStandard::Other => "Other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FuelType {
    Diesel,
    Other,
}

impl FuelType {
    pub fn parse_lenient(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "diesel" | "d" => FuelType::Diesel,
            _ => FuelType::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FuelType::Diesel => "Diesel",
            FuelType::Other => "Other",
        }
    }
}

/// One remote-sensing snapshot of a passing vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsdPass {
    pub vehicle_id: String,
    pub timestamp: UnixSeconds,
    pub site_id: String,
    /// km/h
    pub speed: f64,
    /// m/s²
    pub accel: f64,
    /// NO concentration, ppm.
    pub no_ppm: f64,
    /// CO/CO2
    pub q1: f64,
    /// HC/CO2
    pub q2: f64,
    /// NO/CO2 as measured.
    pub q3_raw: f64,
    pub emission_standard: EmissionStandard,
    pub fuel_type: FuelType,
}

/// A recoverable per-row problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseIssue {
    /// 1-based line number in the source file.
    pub line: u64,
    pub kind: IssueKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IssueKind {
    /// The row has fewer fields than the header.
    MissingField { column: String },
    /// A field could not be parsed.
    MalformedRow { column: String, value: String },
    /// A quantity that must be non-negative is negative.
    NegativeValue { column: String, value: f64 },
    /// The CSV reader could not decode the row at all.
    Unreadable { message: String },
}

impl IssueKind {
    pub fn label(&self) -> &'static str {
        match self {
            IssueKind::MissingField { .. } => "missing_field",
            IssueKind::MalformedRow { .. } => "malformed_row",
            IssueKind::NegativeValue { .. } => "negative_value",
            IssueKind::Unreadable { .. } => "unreadable",
        }
    }
}

impl fmt::Display for IssueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IssueKind::MissingField { column } => write!(f, "missing field `{column}`"),
            IssueKind::MalformedRow { column, value } => {
                write!(f, "malformed `{column}`: {value:?}")
            }
            IssueKind::NegativeValue { column, value } => write!(f, "negative `{column}`: {value}"),
            IssueKind::Unreadable { message } => write!(f, "unreadable row: {message}"),
        }
    }
}

/// A contiguous stretch of one vehicle's OBM records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub vehicle_id: String,
    pub records: Vec<ObmRecord>,
    pub start: UnixSeconds,
    pub end: UnixSeconds,
    /// Fraction of inter-record intervals longer than the gap interval.
    pub gap_fraction: f64,
    /// Fraction of records whose validity flag is false.
    pub invalid_fraction: f64,
}

impl Trip {
    /// Builds a trip from time-ordered records and computes its quality fractions.
    ///
    /// The gap fraction is counted over the `n - 1` intervals, so a single-record
    /// trip has a gap fraction of zero.
    pub fn from_records(
        vehicle_id: impl Into<String>,
        records: Vec<ObmRecord>,
        gap_interval_s: i64,
    ) -> Self {
        let start = records.first().map_or(0, |r| r.timestamp);
        let end = records.last().map_or(0, |r| r.timestamp);
        let intervals = records.len().saturating_sub(1);
        let gaps = records
            .windows(2)
            .filter(|w| w[1].timestamp - w[0].timestamp > gap_interval_s)
            .count();
        let invalid = records.iter().filter(|r| !r.valid).count();
        Trip {
            vehicle_id: vehicle_id.into(),
            start,
            end,
            gap_fraction: if intervals == 0 {
                0.0
            } else {
                gaps as f64 / intervals as f64
            },
            invalid_fraction: if records.is_empty() {
                0.0
            } else {
                invalid as f64 / records.len() as f64
            },
            records,
        }
    }

    pub fn duration(&self) -> i64 {
        self.end - self.start
    }
}

/// An accepted trip together with per-record acceleration estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanTrip {
    pub trip: Trip,
    pub accel: Vec<AccelEstimate>,
}

impl CleanTrip {
    pub fn estimate(
        trip: Trip,
        estimator: &dyn AccelerationEstimator,
    ) -> Result<Self, IngestError> {
        let accel = estimator.estimate(&trip)?;
        Ok(Self { trip, accel })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_parsing() {
        assert_eq!(
            EmissionStandard::parse_lenient("China V"),
            EmissionStandard::ChinaV
        );
        assert_eq!(
            EmissionStandard::parse_lenient("ChinaVI"),
            EmissionStandard::ChinaVI
        );
        assert_eq!(
            EmissionStandard::parse_lenient("cn-4"),
            EmissionStandard::ChinaIV
        );
        assert_eq!(
            EmissionStandard::parse_lenient("5"),
            EmissionStandard::ChinaV
        );
        assert_eq!(
            EmissionStandard::parse_lenient("Euro 6"),
            EmissionStandard::Other
        );
        assert_eq!(FuelType::parse_lenient(" Diesel "), FuelType::Diesel);
        assert_eq!(FuelType::parse_lenient("gasoline"), FuelType::Other);
    }
}
