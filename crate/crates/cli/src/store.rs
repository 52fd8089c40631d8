//! Files exchanged between pipeline stages, all under the output directory.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use noxwatch::ingest::{
    parse_rsd_file, AccelEstimate, CleanTrip, ObmRecord, RsdColumns, RsdPass, Trip, UnixSeconds,
};

use crate::error::CliError;

pub const TRIPS: &str = "trips.csv";
pub const PASSES: &str = "passes.csv";
pub const INGEST_ISSUES: &str = "ingest_issues.csv";
pub const TRIP_REJECTIONS: &str = "trip_rejections.csv";
pub const QUALITY_REPORT: &str = "quality_report.json";
pub const PROFILES: &str = "profiles.csv";
pub const THRESHOLDS: &str = "thresholds.csv";
pub const PROFILE_REPORT: &str = "profile_report.json";
pub const DISPOSITIONS: &str = "dispositions.csv";
pub const VERDICTS: &str = "verdicts.csv";
pub const FACTORS: &str = "factors.csv";
pub const SCREENING_SUMMARY: &str = "screening_summary.json";
pub const GRID_GEOJSON: &str = "reduction_grid.geojson";
pub const GRID_CSV: &str = "reduction_grid.csv";
pub const MAP_SUMMARY_TXT: &str = "reduction_summary.txt";
pub const MAP_SUMMARY_JSON: &str = "reduction_summary.json";
pub const REPORT: &str = "report.json";

/// A stage input that must already exist; the hint names the stage that writes it.
pub fn input(dir: &Path, name: &str, producer: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::data(format!(
            "{} not found; run `noxwatch {producer}` first",
            path.display()
        )))
    }
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::at(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::at(path, e))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::at(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::at(path, e))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::at(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let r = BufReader::new(File::open(path).map_err(|e| CliError::at(path, e))?);
    serde_json::from_reader(r).map_err(|e| CliError::at(path, e))
}

/// Regular files of a directory in name order.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::at(dir, e))? {
        let path = entry.map_err(|e| CliError::at(dir, e))?.path();
        let hidden = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if path.is_file() && !hidden {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

#[derive(Debug, Serialize, Deserialize)]
struct TripRow {
    trip_id: usize,
    vehicle_id: String,
    timestamp: UnixSeconds,
    speed: f64,
    nox_out: f64,
    q_maf: f64,
    q_fr: f64,
    lat: f64,
    lon: f64,
    scr_temp: Option<f64>,
    tank_level: Option<f64>,
    valid: bool,
    accel: f64,
    low_confidence: bool,
}

/// One row per record of every accepted trip, with its acceleration estimate.
pub fn write_trips(path: &Path, trips: &[CleanTrip]) -> Result<(), CliError> {
    let mut out = csv::Writer::from_writer(create(path)?);
    for (id, t) in trips.iter().enumerate() {
        for (r, a) in t.trip.records.iter().zip(&t.accel) {
            out.serialize(TripRow {
                trip_id: id,
                vehicle_id: r.vehicle_id.clone(),
                timestamp: r.timestamp,
                speed: r.speed,
                nox_out: r.nox_out,
                q_maf: r.q_maf,
                q_fr: r.q_fr,
                lat: r.lat,
                lon: r.lon,
                scr_temp: r.scr_temp,
                tank_level: r.tank_level,
                valid: r.valid,
                accel: a.accel,
                low_confidence: a.low_confidence,
            })
            .map_err(|e| CliError::at(path, e))?;
        }
    }
    out.flush().map_err(|e| CliError::at(path, e))
}

/// Reads the trip store back. Trip quality fractions are recomputed with
/// `gap_interval_s`.
pub fn read_trips(path: &Path, gap_interval_s: i64) -> Result<Vec<CleanTrip>, CliError> {
    let file = File::open(path).map_err(|e| CliError::at(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let mut trips = Vec::new();
    let mut current: Option<(usize, String, Vec<ObmRecord>, Vec<AccelEstimate>)> = None;
    let finish =
        |(_, vehicle, records, accel): (usize, String, Vec<ObmRecord>, Vec<AccelEstimate>)| {
            CleanTrip {
                trip: Trip::from_records(vehicle, records, gap_interval_s),
                accel,
            }
        };
    for row in reader.deserialize::<TripRow>() {
        let row = row.map_err(|e| CliError::at(path, e))?;
        if current.as_ref().is_some_and(|c| c.0 != row.trip_id) {
            trips.push(finish(current.take().expect("checked above")));
        }
        let entry = current
            .get_or_insert_with(|| (row.trip_id, row.vehicle_id.clone(), Vec::new(), Vec::new()));
        entry.3.push(AccelEstimate {
            accel: row.accel,
            low_confidence: row.low_confidence,
        });
        entry.2.push(ObmRecord {
            vehicle_id: row.vehicle_id,
            timestamp: row.timestamp,
            speed: row.speed,
            nox_out: row.nox_out,
            q_maf: row.q_maf,
            q_fr: row.q_fr,
            lat: row.lat,
            lon: row.lon,
            scr_temp: row.scr_temp,
            tank_level: row.tank_level,
            valid: row.valid,
        });
    }
    if let Some(c) = current {
        trips.push(finish(c));
    }
    Ok(trips)
}

/// Cleaned passes in the default remote-sensing layout with epoch timestamps,
/// so the file can be fed back to the parser.
pub fn write_passes(path: &Path, passes: &[RsdPass]) -> Result<(), CliError> {
    let cols = RsdColumns::default();
    let mut out = csv::Writer::from_writer(create(path)?);
    let err = |e: csv::Error| CliError::at(path, e);
    out.write_record([
        &cols.vehicle_id,
        &cols.timestamp,
        &cols.site_id,
        &cols.speed,
        &cols.accel,
        &cols.no_ppm,
        &cols.q1,
        &cols.q2,
        &cols.q3_raw,
        &cols.emission_standard,
        &cols.fuel_type,
    ])
    .map_err(err)?;
    for p in passes {
        out.write_record([
            p.vehicle_id.clone(),
            p.timestamp.to_string(),
            p.site_id.clone(),
            p.speed.to_string(),
            p.accel.to_string(),
            p.no_ppm.to_string(),
            p.q1.to_string(),
            p.q2.to_string(),
            p.q3_raw.to_string(),
            p.emission_standard.as_str().to_string(),
            p.fuel_type.as_str().to_string(),
        ])
        .map_err(err)?;
    }
    out.flush().map_err(|e| CliError::at(path, e))
}

pub fn read_passes(path: &Path) -> Result<Vec<RsdPass>, CliError> {
    let file = File::open(path).map_err(|e| CliError::at(path, e))?;
    let out = parse_rsd_file(BufReader::new(file), &RsdColumns::default())
        .map_err(|e| CliError::at(path, e))?;
    if let Some(issue) = out.issues.first() {
        return Err(CliError::data(format!(
            "{}: line {}: {}",
            path.display(),
            issue.line,
            issue.kind
        )));
    }
    Ok(out.records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use noxwatch::ingest::{EmissionStandard, FuelType};

    fn record(ts: i64, speed: f64) -> ObmRecord {
        ObmRecord {
            vehicle_id: "v1".into(),
            timestamp: ts,
            speed,
            nox_out: 310.5,
            q_maf: 600.25,
            q_fr: 18.0,
            lat: 30.6,
            lon: 104.1,
            scr_temp: Some(250.0),
            tank_level: None,
            valid: ts != 20,
        }
    }

    #[test]
    fn trips_round_trip() {
        let dir = std::env::temp_dir().join(format!("noxwatch-store-{}", std::process::id()));
        let path = dir.join(TRIPS);
        let trips: Vec<CleanTrip> = (0..2)
            .map(|k| {
                let records: Vec<_> = (0..4)
                    .map(|i| record(1000 * k + 10 * i, 0.1 + i as f64 / 3.0))
                    .collect();
                let accel = (0..4)
                    .map(|i| AccelEstimate {
                        accel: i as f64 * 0.1,
                        low_confidence: i == 3,
                    })
                    .collect();
                CleanTrip {
                    trip: Trip::from_records("v1", records, 12),
                    accel,
                }
            })
            .collect();
        write_trips(&path, &trips).unwrap();
        let back = read_trips(&path, 12).unwrap();
        fs::remove_dir_all(&dir).ok();
        assert_eq!(back, trips);
    }

    #[test]
    fn passes_round_trip() {
        let dir = std::env::temp_dir().join(format!("noxwatch-passes-{}", std::process::id()));
        let path = dir.join(PASSES);
        let passes = vec![RsdPass {
            vehicle_id: "v9".into(),
            timestamp: 1_700_000_000,
            site_id: "s1".into(),
            speed: 42.1,
            accel: -0.3,
            no_ppm: 812.0,
            q1: 0.01,
            q2: 0.0007,
            q3_raw: 0.0041,
            emission_standard: EmissionStandard::ChinaV,
            fuel_type: FuelType::Diesel,
        }];
        write_passes(&path, &passes).unwrap();
        let back = read_passes(&path).unwrap();
        fs::remove_dir_all(&dir).ok();
        assert_eq!(back, passes);
    }
}
