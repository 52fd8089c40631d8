use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use noxwatch::ingest::{
    apply_ranges, filter_trips, group_by_vehicle, mark_frozen_runs, parse_obm_file, parse_rsd_file,
    segment_trips, AccelerationEstimator, CleanTrip, FiniteDifference, ObmRecord, ParseIssue,
    ParseOutput, RsdPass,
};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::store;

/// Contents of `quality_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub obm_files: usize,
    pub obm_rows_read: usize,
    pub obm_records: usize,
    pub obm_issues: BTreeMap<String, usize>,
    pub out_of_range_records: usize,
    pub frozen_records: usize,
    pub duplicate_records: usize,
    pub vehicles: usize,
    pub trips_segmented: usize,
    pub trips_accepted: usize,
    /// Keyed by first failed criterion.
    pub trips_rejected: BTreeMap<String, usize>,
    pub accepted_records: usize,
    pub low_confidence_accel: usize,
    pub rsd_files: usize,
    pub rsd_rows_read: usize,
    pub rsd_passes: usize,
    pub rsd_issues: BTreeMap<String, usize>,
}

#[derive(Serialize)]
struct IssueRow<'a> {
    source: &'a str,
    file: String,
    line: u64,
    kind: &'static str,
    detail: String,
}

#[derive(Serialize)]
struct RejectionRow<'a> {
    vehicle_id: &'a str,
    start: i64,
    end: i64,
    n_records: usize,
    reason: &'a str,
    gap_fraction: f64,
    invalid_fraction: f64,
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// CSV writer that emits its header up front, so empty logs still have one.
fn headed_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(store::create(path)?);
    w.write_record(header).map_err(|e| CliError::at(path, e))?;
    Ok(w)
}

fn parse_dir<T: Send>(
    dir: &Path,
    what: &str,
    parse: impl Fn(BufReader<File>) -> Result<ParseOutput<T>, noxwatch::ingest::IngestError> + Sync,
) -> Result<Vec<(PathBuf, ParseOutput<T>)>, CliError> {
    PipelineConfig::require_dir(dir, what)?;
    let files = store::list_files(dir)?;
    if files.is_empty() {
        return Err(CliError::data(format!(
            "no {what} files in {}",
            dir.display()
        )));
    }
    files
        .into_par_iter()
        .map(|path| {
            let f = File::open(&path).map_err(|e| CliError::at(&path, e))?;
            let out = parse(BufReader::new(f)).map_err(|e| CliError::at(&path, e))?;
            log::info!(
                "{}: {} rows, {} issues",
                path.display(),
                out.rows_read,
                out.issues.len()
            );
            Ok((path, out))
        })
        .collect()
}

fn count_issues<'a>(issues: impl Iterator<Item = &'a ParseIssue>) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for i in issues {
        *counts.entry(i.kind.label().to_string()).or_default() += 1;
    }
    counts
}

struct VehicleOutcome {
    frozen: usize,
    segmented: usize,
    accepted: Vec<CleanTrip>,
    rejected: Vec<(noxwatch::ingest::Trip, &'static str)>,
}

fn process_vehicle(
    vehicle: &str,
    mut records: Vec<ObmRecord>,
    cfg: &PipelineConfig,
) -> VehicleOutcome {
    let frozen = mark_frozen_runs(&mut records, cfg.trip.frozen_run_len);
    let trips = segment_trips(vehicle, records, &cfg.segment);
    let segmented = trips.len();
    let (accepted, rejected) = filter_trips(trips, &cfg.trip);
    let mut rejected: Vec<_> = rejected
        .into_iter()
        .map(|r| (r.trip, r.reason.as_str()))
        .collect();
    let estimator = FiniteDifference {
        max_interval_s: cfg.segment.gap_interval_s,
    };
    let mut clean = Vec::with_capacity(accepted.len());
    for trip in accepted {
        match estimator.estimate(&trip) {
            Ok(accel) => clean.push(CleanTrip { trip, accel }),
            Err(_) => rejected.push((trip, "degenerate")),
        }
    }
    rejected.sort_by_key(|(t, _)| t.start);
    VehicleOutcome {
        frozen,
        segmented,
        accepted: clean,
        rejected,
    }
}

/// Parses, validates and segments the raw inputs, then writes the trip and
/// pass stores with their issue logs and a quality report.
pub fn run(cfg: &PipelineConfig) -> Result<QualityReport, CliError> {
    let out_dir = &cfg.paths.output_dir;
    let obm = parse_dir(&cfg.paths.obm_dir, "OBM", |r| {
        parse_obm_file(r, &cfg.columns.obm)
    })?;
    let rsd = parse_dir(&cfg.paths.rsd_dir, "RSD", |r| {
        parse_rsd_file(r, &cfg.columns.rsd)
    })?;

    let issues_path = out_dir.join(store::INGEST_ISSUES);
    let mut issues = headed_writer(&issues_path, &["source", "file", "line", "kind", "detail"])?;
    let all_issues = obm
        .iter()
        .map(|(p, o)| ("obm", p, &o.issues))
        .chain(rsd.iter().map(|(p, o)| ("rsd", p, &o.issues)));
    for (source, path, list) in all_issues {
        for i in list {
            issues
                .serialize(IssueRow {
                    source,
                    file: file_name(path),
                    line: i.line,
                    kind: i.kind.label(),
                    detail: i.kind.to_string(),
                })
                .map_err(|e| CliError::at(&issues_path, e))?;
        }
    }
    issues.flush().map_err(|e| CliError::at(&issues_path, e))?;

    let obm_files = obm.len();
    let obm_rows_read = obm.iter().map(|(_, o)| o.rows_read).sum();
    let obm_issues = count_issues(obm.iter().flat_map(|(_, o)| &o.issues));
    let mut records: Vec<ObmRecord> = obm.into_iter().flat_map(|(_, o)| o.records).collect();
    let obm_records = records.len();
    let out_of_range = apply_ranges(&mut records, &cfg.ranges);
    let (by_vehicle, duplicates) = group_by_vehicle(records);
    let vehicles = by_vehicle.len();

    let outcomes: Vec<VehicleOutcome> = by_vehicle
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(v, recs)| process_vehicle(&v, recs, cfg))
        .collect();

    let mut trips_rejected: BTreeMap<String, usize> = BTreeMap::new();
    let rej_path = out_dir.join(store::TRIP_REJECTIONS);
    let mut rejections = headed_writer(
        &rej_path,
        &[
            "vehicle_id",
            "start",
            "end",
            "n_records",
            "reason",
            "gap_fraction",
            "invalid_fraction",
        ],
    )?;
    for o in &outcomes {
        for (t, reason) in &o.rejected {
            *trips_rejected.entry(reason.to_string()).or_default() += 1;
            rejections
                .serialize(RejectionRow {
                    vehicle_id: &t.vehicle_id,
                    start: t.start,
                    end: t.end,
                    n_records: t.records.len(),
                    reason,
                    gap_fraction: t.gap_fraction,
                    invalid_fraction: t.invalid_fraction,
                })
                .map_err(|e| CliError::at(&rej_path, e))?;
        }
    }
    rejections.flush().map_err(|e| CliError::at(&rej_path, e))?;

    let frozen_records = outcomes.iter().map(|o| o.frozen).sum();
    let trips_segmented = outcomes.iter().map(|o| o.segmented).sum();
    let trips: Vec<CleanTrip> = outcomes.into_iter().flat_map(|o| o.accepted).collect();
    store::write_trips(&out_dir.join(store::TRIPS), &trips)?;

    let rsd_files = rsd.len();
    let rsd_rows_read = rsd.iter().map(|(_, o)| o.rows_read).sum();
    let rsd_issues = count_issues(rsd.iter().flat_map(|(_, o)| &o.issues));
    let mut passes: Vec<RsdPass> = rsd.into_iter().flat_map(|(_, o)| o.records).collect();
    passes.sort_by(|a, b| {
        (&a.vehicle_id, a.timestamp, &a.site_id).cmp(&(&b.vehicle_id, b.timestamp, &b.site_id))
    });
    store::write_passes(&out_dir.join(store::PASSES), &passes)?;

    let report = QualityReport {
        obm_files,
        obm_rows_read,
        obm_records,
        obm_issues,
        out_of_range_records: out_of_range,
        frozen_records,
        duplicate_records: duplicates.len(),
        vehicles,
        trips_segmented,
        trips_accepted: trips.len(),
        trips_rejected,
        accepted_records: trips.iter().map(|t| t.trip.records.len()).sum(),
        low_confidence_accel: trips
            .iter()
            .flat_map(|t| &t.accel)
            .filter(|a| a.low_confidence)
            .count(),
        rsd_files,
        rsd_rows_read,
        rsd_passes: passes.len(),
        rsd_issues,
    };
    store::write_json(&out_dir.join(store::QUALITY_REPORT), &report)?;
    Ok(report)
}
