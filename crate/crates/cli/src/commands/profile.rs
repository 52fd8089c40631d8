use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use noxwatch::binning::{OperatingBin, SpeedRange};
use noxwatch::factors::FuelConsumption;
use noxwatch::profiling::{
    derive_thresholds, fleet_fuel_consumption, histogram_mode, pattern_histogram,
    range_fuel_consumption, write_profiles, write_thresholds, MeanWeighting, ProfileAccumulator,
    ProfileSet, ThresholdSource,
};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::store;

/// Trips per parallel work unit. Fixed so results do not depend on the thread count.
pub const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramEntry {
    pub bin: OperatingBin,
    pub fraction: f64,
}

/// Contents of `profile_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub trips: usize,
    pub records_used: usize,
    pub zero_fuel_records: usize,
    pub skipped_records: usize,
    pub total_dwell_s: f64,
    pub weighting: MeanWeighting,
    pub multiplier: f64,
    pub min_samples: usize,
    pub bins_with_own_threshold: usize,
    pub bins_with_range_threshold: usize,
    pub bins_without_threshold: usize,
    /// L/km
    pub fuel_consumption: FuelConsumption,
    pub fuel_consumption_l_per_100km: f64,
    pub range_fuel_consumption_l_per_100km: BTreeMap<SpeedRange, f64>,
    pub pattern_histogram: Vec<HistogramEntry>,
    pub dominant_bin: Option<OperatingBin>,
}

pub fn build(
    trips: &[noxwatch::ingest::CleanTrip],
    cfg: &PipelineConfig,
) -> Result<ProfileSet, CliError> {
    let partials: Vec<ProfileAccumulator> = trips
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = ProfileAccumulator::new();
            for t in chunk {
                acc.add_trip(t, &cfg.fuel, &cfg.vsp, &cfg.profile);
            }
            acc
        })
        .collect();
    let mut acc = ProfileAccumulator::new();
    for p in partials {
        acc.merge(p);
    }
    acc.finish(cfg.profile.weighting)
        .map_err(|e| CliError::data(format!("profiling: {e}")))
}

/// Builds per-bin profiles from the trip store and derives thresholds and
/// fuel consumption.
pub fn run(cfg: &PipelineConfig) -> Result<ProfileReport, CliError> {
    let dir = &cfg.paths.output_dir;
    let trips_path = store::input(dir, store::TRIPS, "ingest")?;
    let trips = store::read_trips(&trips_path, cfg.segment.gap_interval_s)?;
    if trips.is_empty() {
        return Err(CliError::data(format!(
            "{} holds no accepted trips; check trip_rejections.csv",
            trips_path.display()
        )));
    }
    let set = build(&trips, cfg)?;
    let table = derive_thresholds(&set, &cfg.thresholds)
        .map_err(|e| CliError::data(format!("thresholds: {e}")))?;
    let fleet = fleet_fuel_consumption(&set)
        .map_err(|e| CliError::data(format!("fuel consumption: {e}")))?;
    let by_range = range_fuel_consumption(&set);

    let path = dir.join(store::PROFILES);
    let mut w = store::create(&path)?;
    write_profiles(&mut w, &set, Some(&table)).map_err(|e| CliError::at(&path, e))?;
    let path = dir.join(store::THRESHOLDS);
    let mut w = store::create(&path)?;
    write_thresholds(&mut w, &table).map_err(|e| CliError::at(&path, e))?;

    let count = |s: ThresholdSource| table.bins.iter().filter(|b| b.source == s).count();
    let hist = pattern_histogram(&set);
    let report = ProfileReport {
        trips: trips.len(),
        records_used: set.records_used,
        zero_fuel_records: set.zero_fuel_records,
        skipped_records: set.skipped_records,
        total_dwell_s: set.total_dwell_s,
        weighting: set.weighting,
        multiplier: table.multiplier,
        min_samples: table.min_samples,
        bins_with_own_threshold: count(ThresholdSource::Bin),
        bins_with_range_threshold: count(ThresholdSource::Range),
        bins_without_threshold: count(ThresholdSource::None),
        fuel_consumption_l_per_100km: 100.0 * fleet,
        range_fuel_consumption_l_per_100km: by_range.iter().map(|(r, v)| (*r, 100.0 * v)).collect(),
        fuel_consumption: FuelConsumption { fleet, by_range },
        dominant_bin: histogram_mode(&hist),
        pattern_histogram: hist
            .into_iter()
            .map(|(bin, fraction)| HistogramEntry { bin, fraction })
            .collect(),
    };
    store::write_json(&dir.join(store::PROFILE_REPORT), &report)?;
    Ok(report)
}
