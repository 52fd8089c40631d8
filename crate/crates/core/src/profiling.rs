//! Per-bin fleet statistics of the NOx/CO2 ratio, high-emitter thresholds,
//! driving-pattern distributions and fleet fuel consumption.
//!
//! Profiles are built with [`ProfileAccumulator`], a fold over records that
//! can be merged in any order. Each valid record contributes one ratio
//! sample to its operating bin and a dwell time (interval to the next record,
//! capped) to the bin's time share. Records with a zero fuel rate still count
//! towards dwell, fuel and speed statistics but have no ratio.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::{classify_state, OperatingBin, SpeedRange, VspParams};
use crate::emissions::{obm_sample, FuelConstants};
use crate::ingest::CleanTrip;
use crate::versioned::{self, VersionedError};

#[derive(Debug, Error)]
pub enum ProfilingError {
    #[error("no valid records to profile")]
    EmptyInput,
    #[error("no operating bin reaches {min_samples} ratio samples")]
    InsufficientData { min_samples: usize },
    #[error("fleet travels no distance: all dwell is at zero speed")]
    ZeroDistance,
    #[error("invalid parameter: {0}")]
    InvalidParams(&'static str),
    #[error("bad profile file: {0}")]
    File(#[from] VersionedError),
}

/// How per-bin means are averaged across vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanWeighting {
    /// Every ratio sample has equal weight.
    #[default]
    Sample,
    /// Mean of per-vehicle means.
    PerVehicle,
}

impl MeanWeighting {
    pub fn as_str(self) -> &'static str {
        match self {
            MeanWeighting::Sample => "sample",
            MeanWeighting::PerVehicle => "per_vehicle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    /// Upper bound on the dwell credited to one record, seconds.
    pub dwell_cap_s: f64,
    pub weighting: MeanWeighting,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            dwell_cap_s: 12.0,
            weighting: MeanWeighting::Sample,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct BinAccumulator {
    ratios: Vec<f64>,
    ratio_sum: f64,
    dwell_s: f64,
    fuel_dwell: f64,
    speed_dwell: f64,
    per_vehicle: BTreeMap<String, (usize, f64)>,
}

impl BinAccumulator {
    fn merge(&mut self, other: BinAccumulator) {
        self.ratios.extend(other.ratios);
        self.ratio_sum += other.ratio_sum;
        self.dwell_s += other.dwell_s;
        self.fuel_dwell += other.fuel_dwell;
        self.speed_dwell += other.speed_dwell;
        for (vehicle, (n, sum)) in other.per_vehicle {
            let e = self.per_vehicle.entry(vehicle).or_default();
            e.0 += n;
            e.1 += sum;
        }
    }
}

/// Mergeable partial profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileAccumulator {
    bins: Vec<BinAccumulator>,
    records: usize,
    zero_fuel: usize,
    skipped_invalid: usize,
}

impl Default for ProfileAccumulator {
    fn default() -> Self {
        Self {
            bins: vec![BinAccumulator::default(); OperatingBin::COUNT],
            records: 0,
            zero_fuel: 0,
            skipped_invalid: 0,
        }
    }
}

impl ProfileAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one classified state.
    pub fn add_state(
        &mut self,
        vehicle_id: &str,
        bin: OperatingBin,
        ratio: Option<f64>,
        dwell_s: f64,
        q_fr: f64,
        speed: f64,
    ) {
        let acc = &mut self.bins[bin.index()];
        self.records += 1;
        acc.dwell_s += dwell_s;
        acc.fuel_dwell += q_fr * dwell_s;
        acc.speed_dwell += speed * dwell_s;
        match ratio {
            Some(r) => {
                acc.ratios.push(r);
                acc.ratio_sum += r;
                let e = acc.per_vehicle.entry(vehicle_id.to_string()).or_default();
                e.0 += 1;
                e.1 += r;
            }
            None => self.zero_fuel += 1,
        }
    }

    pub fn add_trip(
        &mut self,
        trip: &CleanTrip,
        c: &FuelConstants,
        p: &VspParams,
        cfg: &ProfileConfig,
    ) {
        let recs = &trip.trip.records;
        for (i, r) in recs.iter().enumerate() {
            if !r.valid {
                self.skipped_invalid += 1;
                continue;
            }
            let accel = trip.accel.get(i).map_or(0.0, |a| a.accel);
            let (bin, sample) = match (
                classify_state(r.speed, accel, p),
                obm_sample(r.nox_out, r.q_maf, r.q_fr, c),
            ) {
                (Ok((bin, _)), Ok(sample)) => (bin, sample),
                _ => {
                    self.skipped_invalid += 1;
                    continue;
                }
            };
            let dwell = recs.get(i + 1).map_or(0.0, |next| {
                ((next.timestamp - r.timestamp) as f64).min(cfg.dwell_cap_s)
            });
            self.add_state(
                &trip.trip.vehicle_id,
                bin,
                sample.ratio_nox_co2,
                dwell,
                r.q_fr,
                r.speed,
            );
        }
    }

    pub fn merge(&mut self, other: ProfileAccumulator) {
        for (mine, theirs) in self.bins.iter_mut().zip(other.bins) {
            mine.merge(theirs);
        }
        self.records += other.records;
        self.zero_fuel += other.zero_fuel;
        self.skipped_invalid += other.skipped_invalid;
    }

    pub fn finish(self, weighting: MeanWeighting) -> Result<ProfileSet, ProfilingError> {
        let total_dwell: f64 = self.bins.iter().map(|b| b.dwell_s).sum();
        if self.records == 0 || total_dwell <= 0.0 {
            return Err(ProfilingError::EmptyInput);
        }
        let profiles = OperatingBin::ALL
            .into_iter()
            .zip(self.bins)
            .map(|(bin, mut acc)| {
                let n = acc.ratios.len();
                acc.ratios.sort_by(f64::total_cmp);
                let mean_ratio = match (n, weighting) {
                    (0, _) => None,
                    (_, MeanWeighting::Sample) => Some(acc.ratio_sum / n as f64),
                    (_, MeanWeighting::PerVehicle) => {
                        let means: f64 = acc.per_vehicle.values().map(|(k, s)| s / *k as f64).sum();
                        Some(means / acc.per_vehicle.len() as f64)
                    }
                };
                let per_dwell = |x: f64| {
                    if acc.dwell_s > 0.0 {
                        x / acc.dwell_s
                    } else {
                        0.0
                    }
                };
                BinProfile {
                    bin,
                    n,
                    n_vehicles: acc.per_vehicle.len(),
                    mean_ratio,
                    median_ratio: quantile(&acc.ratios, 0.5),
                    p25: quantile(&acc.ratios, 0.25),
                    p75: quantile(&acc.ratios, 0.75),
                    mean_fuel_rate: per_dwell(acc.fuel_dwell),
                    mean_speed: per_dwell(acc.speed_dwell),
                    time_fraction: acc.dwell_s / total_dwell,
                    dwell_s: acc.dwell_s,
                }
            })
            .collect();
        Ok(ProfileSet {
            profiles,
            weighting,
            total_dwell_s: total_dwell,
            records_used: self.records,
            zero_fuel_records: self.zero_fuel,
            skipped_records: self.skipped_invalid,
        })
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    match sorted.len() {
        0 => None,
        1 => Some(sorted[0]),
        n => {
            let h = (n - 1) as f64 * q;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
        }
    }
}

/// Statistics of one operating bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinProfile {
    pub bin: OperatingBin,
    /// Number of ratio samples.
    pub n: usize,
    pub n_vehicles: usize,
    pub mean_ratio: Option<f64>,
    pub median_ratio: Option<f64>,
    pub p25: Option<f64>,
    pub p75: Option<f64>,
    /// Dwell-weighted mean fuel rate, L/h.
    pub mean_fuel_rate: f64,
    /// Dwell-weighted mean speed, km/h.
    pub mean_speed: f64,
    pub time_fraction: f64,
    pub dwell_s: f64,
}

/// Profiles for all 22 bins in [`OperatingBin::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub profiles: Vec<BinProfile>,
    pub weighting: MeanWeighting,
    pub total_dwell_s: f64,
    pub records_used: usize,
    pub zero_fuel_records: usize,
    pub skipped_records: usize,
}

impl ProfileSet {
    /// A set with no observations.
    pub fn empty() -> Self {
        Self {
            profiles: Vec::new(),
            weighting: MeanWeighting::Sample,
            total_dwell_s: 0.0,
            records_used: 0,
            zero_fuel_records: 0,
            skipped_records: 0,
        }
    }

    pub fn get(&self, bin: OperatingBin) -> Option<&BinProfile> {
        self.profiles.iter().find(|p| p.bin == bin)
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty() || self.total_dwell_s <= 0.0
    }
}

/// Profiles every valid record of the given accepted trips.
pub fn build_profiles(
    trips: &[CleanTrip],
    c: &FuelConstants,
    p: &VspParams,
    cfg: &ProfileConfig,
) -> Result<ProfileSet, ProfilingError> {
    let mut acc = ProfileAccumulator::new();
    for trip in trips {
        acc.add_trip(trip, c, p, cfg);
    }
    acc.finish(cfg.weighting)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdParams {
    pub multiplier: f64,
    pub min_samples: usize,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            multiplier: 2.0,
            min_samples: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSource {
    /// The bin's own mean.
    Bin,
    /// Inherited from the bin's speed range.
    Range,
    /// No threshold available.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinThreshold {
    pub bin: OperatingBin,
    pub n: usize,
    pub mean: Option<f64>,
    pub threshold: Option<f64>,
    pub source: ThresholdSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeThreshold {
    pub range: SpeedRange,
    pub n: usize,
    pub mean: Option<f64>,
    pub threshold: Option<f64>,
}

/// High-emitter cut points per bin and per speed range. Immutable once derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub multiplier: f64,
    pub min_samples: usize,
    pub provenance: String,
    pub bins: Vec<BinThreshold>,
    pub ranges: Vec<RangeThreshold>,
}

impl ThresholdTable {
    pub fn bin(&self, bin: OperatingBin) -> Option<&BinThreshold> {
        self.bins.iter().find(|b| b.bin == bin)
    }

    /// Threshold applied to a pass in `bin` (own or inherited).
    pub fn threshold(&self, bin: OperatingBin) -> Option<f64> {
        self.bin(bin).and_then(|b| b.threshold)
    }

    pub fn range_threshold(&self, range: SpeedRange) -> Option<f64> {
        self.ranges
            .iter()
            .find(|r| r.range == range)
            .and_then(|r| r.threshold)
    }
}

/// Threshold = multiplier x mean for bins with enough samples; sparse bins
/// inherit multiplier x the sample-weighted mean of their speed range.
pub fn derive_thresholds(
    profiles: &ProfileSet,
    params: &ThresholdParams,
) -> Result<ThresholdTable, ProfilingError> {
    if !(params.multiplier.is_finite() && params.multiplier > 0.0) {
        return Err(ProfilingError::InvalidParams("multiplier"));
    }
    if profiles.is_empty() {
        return Err(ProfilingError::EmptyInput);
    }
    if !profiles
        .profiles
        .iter()
        .any(|p| p.n >= params.min_samples && p.mean_ratio.is_some())
    {
        return Err(ProfilingError::InsufficientData {
            min_samples: params.min_samples,
        });
    }

    let ranges: Vec<RangeThreshold> = SpeedRange::ALL
        .into_iter()
        .map(|range| {
            let (n, weighted) = profiles
                .profiles
                .iter()
                .filter(|p| p.bin.speed_class().range() == Some(range))
                .filter_map(|p| p.mean_ratio.map(|m| (p.n, m)))
                .fold((0usize, 0.0), |(n, s), (k, m)| (n + k, s + k as f64 * m));
            let mean = (n > 0).then(|| weighted / n as f64);
            RangeThreshold {
                range,
                n,
                mean,
                threshold: mean.map(|m| params.multiplier * m),
            }
        })
        .collect();

    let bins = profiles
        .profiles
        .iter()
        .map(|p| {
            let own = p.mean_ratio.filter(|_| p.n >= params.min_samples);
            let inherited = p
                .bin
                .speed_class()
                .range()
                .and_then(|r| ranges.iter().find(|t| t.range == r))
                .and_then(|t| t.threshold);
            let (threshold, source) = match (own, inherited) {
                (Some(m), _) => (Some(params.multiplier * m), ThresholdSource::Bin),
                (None, Some(t)) => (Some(t), ThresholdSource::Range),
                (None, None) => (None, ThresholdSource::None),
            };
            BinThreshold {
                bin: p.bin,
                n: p.n,
                mean: p.mean_ratio,
                threshold,
                source,
            }
        })
        .collect();

    Ok(ThresholdTable {
        multiplier: params.multiplier,
        min_samples: params.min_samples,
        provenance: format!(
            "obm:{}:records={}",
            profiles.weighting.as_str(),
            profiles.records_used
        ),
        bins,
        ranges,
    })
}

/// Fleet fuel consumption in L/km: time-averaged fuel rate over time-averaged speed.
pub fn fleet_fuel_consumption(profiles: &ProfileSet) -> Result<f64, ProfilingError> {
    let (fuel, speed) = profiles.profiles.iter().fold((0.0, 0.0), |(f, v), p| {
        (
            f + p.mean_fuel_rate * p.time_fraction,
            v + p.mean_speed * p.time_fraction,
        )
    });
    if speed > 0.0 && speed.is_finite() {
        Ok(fuel / speed)
    } else {
        Err(ProfilingError::ZeroDistance)
    }
}

/// Fuel consumption restricted to the bins of each speed range. Ranges with
/// no moving dwell are omitted.
pub fn range_fuel_consumption(profiles: &ProfileSet) -> BTreeMap<SpeedRange, f64> {
    SpeedRange::ALL
        .into_iter()
        .filter_map(|range| {
            let (fuel, speed) = profiles
                .profiles
                .iter()
                .filter(|p| p.bin.speed_class().range() == Some(range))
                .fold((0.0, 0.0), |(f, v), p| {
                    (
                        f + p.mean_fuel_rate * p.time_fraction,
                        v + p.mean_speed * p.time_fraction,
                    )
                });
            (speed > 0.0).then(|| (range, fuel / speed))
        })
        .collect()
}

/// Time share of every bin, in bin order. Empty for an empty profile set.
pub fn pattern_histogram(profiles: &ProfileSet) -> Vec<(OperatingBin, f64)> {
    if profiles.is_empty() {
        return Vec::new();
    }
    profiles
        .profiles
        .iter()
        .map(|p| (p.bin, p.time_fraction))
        .collect()
}

/// Count-based distribution of classified states, e.g. remote-sensing passes.
pub fn bin_histogram(bins: impl IntoIterator<Item = OperatingBin>) -> Vec<(OperatingBin, f64)> {
    let mut counts = [0usize; OperatingBin::COUNT];
    let mut total = 0usize;
    for b in bins {
        counts[b.index()] += 1;
        total += 1;
    }
    if total == 0 {
        return Vec::new();
    }
    OperatingBin::ALL
        .into_iter()
        .map(|b| (b, counts[b.index()] as f64 / total as f64))
        .collect()
}

/// Bin with the largest share; ties go to the lower bin.
pub fn histogram_mode(hist: &[(OperatingBin, f64)]) -> Option<OperatingBin> {
    hist.iter()
        .fold(None::<(OperatingBin, f64)>, |best, &(b, f)| match best {
            Some((_, bf)) if bf >= f => best,
            _ => Some((b, f)),
        })
        .map(|(b, _)| b)
}

pub const PROFILES_KIND: &str = "noxwatch-profiles";
pub const THRESHOLDS_KIND: &str = "noxwatch-thresholds";
pub const FILE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    bin: OperatingBin,
    n: usize,
    n_vehicles: usize,
    mean: Option<f64>,
    median: Option<f64>,
    p25: Option<f64>,
    p75: Option<f64>,
    mean_fuel_rate: f64,
    mean_speed: f64,
    time_fraction: f64,
    dwell_s: f64,
    threshold: Option<f64>,
}

/// Writes the per-bin profile CSV. `thresholds`, when given, fills the threshold column.
pub fn write_profiles<W: Write>(
    w: W,
    set: &ProfileSet,
    thresholds: Option<&ThresholdTable>,
) -> Result<(), ProfilingError> {
    let meta = [
        ("weighting", set.weighting.as_str().to_string()),
        ("total_dwell_s", set.total_dwell_s.to_string()),
        ("records_used", set.records_used.to_string()),
        ("zero_fuel_records", set.zero_fuel_records.to_string()),
        ("skipped_records", set.skipped_records.to_string()),
    ];
    let rows = set.profiles.iter().map(|p| ProfileRow {
        bin: p.bin,
        n: p.n,
        n_vehicles: p.n_vehicles,
        mean: p.mean_ratio,
        median: p.median_ratio,
        p25: p.p25,
        p75: p.p75,
        mean_fuel_rate: p.mean_fuel_rate,
        mean_speed: p.mean_speed,
        time_fraction: p.time_fraction,
        dwell_s: p.dwell_s,
        threshold: thresholds.and_then(|t| t.threshold(p.bin)),
    });
    versioned::write(w, PROFILES_KIND, FILE_VERSION, &meta, rows)?;
    Ok(())
}

pub fn read_profiles(text: &str) -> Result<ProfileSet, ProfilingError> {
    let doc = versioned::read::<ProfileRow>(text, PROFILES_KIND, FILE_VERSION)?;
    let weighting = match doc.meta.get("weighting").map(String::as_str) {
        Some("per_vehicle") => MeanWeighting::PerVehicle,
        _ => MeanWeighting::Sample,
    };
    Ok(ProfileSet {
        weighting,
        total_dwell_s: doc.meta_parse("total_dwell_s")?,
        records_used: doc.meta_parse("records_used")?,
        zero_fuel_records: doc.meta_parse("zero_fuel_records")?,
        skipped_records: doc.meta_parse("skipped_records")?,
        profiles: doc
            .rows
            .into_iter()
            .map(|r| BinProfile {
                bin: r.bin,
                n: r.n,
                n_vehicles: r.n_vehicles,
                mean_ratio: r.mean,
                median_ratio: r.median,
                p25: r.p25,
                p75: r.p75,
                mean_fuel_rate: r.mean_fuel_rate,
                mean_speed: r.mean_speed,
                time_fraction: r.time_fraction,
                dwell_s: r.dwell_s,
            })
            .collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ThresholdRow {
    scope: String,
    key: String,
    n: usize,
    mean: Option<f64>,
    threshold: Option<f64>,
    source: Option<ThresholdSource>,
}

pub fn write_thresholds<W: Write>(w: W, table: &ThresholdTable) -> Result<(), ProfilingError> {
    let meta = [
        ("multiplier", table.multiplier.to_string()),
        ("min_samples", table.min_samples.to_string()),
        ("provenance", table.provenance.clone()),
    ];
    let bins = table.bins.iter().map(|b| ThresholdRow {
        scope: "bin".into(),
        key: b.bin.to_string(),
        n: b.n,
        mean: b.mean,
        threshold: b.threshold,
        source: Some(b.source),
    });
    let ranges = table.ranges.iter().map(|r| ThresholdRow {
        scope: "range".into(),
        key: r.range.to_string(),
        n: r.n,
        mean: r.mean,
        threshold: r.threshold,
        source: None,
    });
    versioned::write(w, THRESHOLDS_KIND, FILE_VERSION, &meta, bins.chain(ranges))?;
    Ok(())
}

pub fn read_thresholds(text: &str) -> Result<ThresholdTable, ProfilingError> {
    let doc = versioned::read::<ThresholdRow>(text, THRESHOLDS_KIND, FILE_VERSION)?;
    let mut bins = Vec::new();
    let mut ranges = Vec::new();
    for row in &doc.rows {
        let bad = || {
            ProfilingError::File(VersionedError::Metadata(format!(
                "{}:{}",
                row.scope, row.key
            )))
        };
        match row.scope.as_str() {
            "bin" => bins.push(BinThreshold {
                bin: row.key.parse().map_err(|_| bad())?,
                n: row.n,
                mean: row.mean,
                threshold: row.threshold,
                source: row.source.unwrap_or(ThresholdSource::None),
            }),
            "range" => ranges.push(RangeThreshold {
                range: row.key.parse().map_err(|_| bad())?,
                n: row.n,
                mean: row.mean,
                threshold: row.threshold,
            }),
            _ => return Err(bad()),
        }
    }
    Ok(ThresholdTable {
        multiplier: doc.meta_parse("multiplier")?,
        min_samples: doc.meta_parse("min_samples")?,
        provenance: doc.meta.get("provenance").cloned().unwrap_or_default(),
        bins,
        ranges,
    })
}
