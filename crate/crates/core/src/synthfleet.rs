//! Synthetic OBM trips and remote-sensing passes for a fleet with planted
//! high emitters, together with a ground-truth manifest.
//!
//! Every vehicle draws from its own ChaCha stream derived from the master
//! seed, so output is reproducible bit for bit. Ratios are generated per
//! operating bin: an NBV baseline that falls with VSP in the medium and high
//! ranges, multiplied for high emitters, with mean-one lognormal noise. The
//! NOx concentration of each OBM record is back-solved so that the record's
//! NOx/CO2 mass ratio equals the drawn ratio exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::{classify_state, OperatingBin, SpeedClass, SpeedRange, VspParams};
use crate::emissions::{exhaust_mass_flow, FuelConstants};
use crate::factors::fuel_specific_ef;
use crate::ingest::{
    estimate_acceleration, EmissionStandard, FuelType, ObmRecord, RejectReason, RsdPass,
    SegmentParams, Trip, TripCriteria, UnixSeconds,
};
use crate::reduction_map::traversal_distance;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid fleet spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Relative standard deviations per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub ratio: f64,
    pub fuel: f64,
    pub maf: f64,
    pub q1: f64,
    pub q2: f64,
    pub rsd: f64,
    /// Absolute cruise speed jitter, km/h.
    pub speed_kmh: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            ratio: 0.15,
            fuel: 0.05,
            maf: 0.05,
            q1: 0.10,
            q2: 0.10,
            rsd: 0.15,
            speed_kmh: 1.5,
        }
    }
}

/// Piecewise drive cycle: idle, ramp to a cruise speed, cruise, repeat, stop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriveCycle {
    pub trip_duration_s: i64,
    pub sample_interval_s: i64,
    pub max_speed_kmh: f64,
    pub cruise_min_kmh: f64,
    pub idle_s: (i64, i64),
    pub cruise_s: (i64, i64),
    pub legs: (u32, u32),
    /// Acceleration magnitude range for ramps up, m/s².
    pub accel: (f64, f64),
    /// Deceleration magnitude range for gentle slow-downs, m/s².
    pub decel: (f64, f64),
    /// Deceleration magnitude range for hard stops, m/s².
    pub brake: (f64, f64),
    pub brake_probability: f64,
}

impl Default for DriveCycle {
    fn default() -> Self {
        Self {
            trip_duration_s: 3600,
            sample_interval_s: 10,
            max_speed_kmh: 90.0,
            cruise_min_kmh: 8.0,
            idle_s: (20, 120),
            cruise_s: (60, 360),
            legs: (1, 4),
            accel: (0.25, 0.8),
            decel: (0.3, 0.88),
            brake: (1.0, 1.4),
            brake_probability: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CityBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Default for CityBox {
    fn default() -> Self {
        Self {
            lat_min: 30.55,
            lat_max: 30.75,
            lon_min: 103.95,
            lon_max: 104.20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetSpec {
    pub n_vehicles: usize,
    pub he_fraction: f64,
    pub he_ratio_multiplier: f64,
    pub seed: u64,
    /// Probability that an interior OBM record is lost.
    pub dropout: f64,
    /// Probability that an emitted OBM row is written with a malformed field.
    pub corrupt_fraction: f64,
    pub noise: NoiseSpec,
    pub drive_cycle: DriveCycle,
    pub city_box: CityBox,
    pub trips_per_vehicle: usize,
    pub campaign_days: i64,
    /// First campaign day, UTC seconds at local midnight.
    pub start_epoch: UnixSeconds,
    /// Local hour range in which trips start.
    pub trip_start_hours: (u32, u32),
    pub passes_per_vehicle: usize,
    pub rsd_min_speed_kmh: f64,
    pub rsd_sites: usize,
    /// Plume CO2 range, ppm.
    pub plume_co2_ppm: (f64, f64),
    pub mean_q1: f64,
    pub mean_q2: f64,
    pub mass_t: f64,
    /// L/h at zero load.
    pub idle_fuel_lh: f64,
    /// L/kWh of positive tractive power.
    pub fuel_per_kwh: f64,
    pub air_fuel_ratio: f64,
    /// Per-bin NBV ratios overriding the built-in baseline.
    pub baseline: BTreeMap<OperatingBin, f64>,
}

impl Default for FleetSpec {
    fn default() -> Self {
        Self {
            n_vehicles: 100,
            he_fraction: 0.07,
            he_ratio_multiplier: 3.0,
            seed: 42,
            dropout: 0.0,
            corrupt_fraction: 0.0,
            noise: NoiseSpec::default(),
            drive_cycle: DriveCycle::default(),
            city_box: CityBox::default(),
            trips_per_vehicle: 2,
            campaign_days: 150,
            start_epoch: 1_672_502_400, // 2023-01-01T00:00:00+08:00
            trip_start_hours: (5, 22),
            passes_per_vehicle: 5,
            rsd_min_speed_kmh: 30.0,
            rsd_sites: 8,
            plume_co2_ppm: (20_000.0, 200_000.0),
            mean_q1: 0.02,
            mean_q2: 0.001,
            mass_t: 30.0,
            idle_fuel_lh: 2.5,
            fuel_per_kwh: 0.235,
            air_fuel_ratio: 25.0,
            baseline: BTreeMap::new(),
        }
    }
}

/// Built-in NBV mean NOx/CO2 per bin.
pub fn default_baseline(bin: OperatingBin) -> f64 {
    use OperatingBin::*;
    match bin {
        Bin0 => 0.0060,
        Bin1 => 0.0110,
        Bin11 => 0.0090,
        Bin12 => 0.0085,
        Bin13 => 0.0080,
        Bin14 => 0.0078,
        Bin15 => 0.0075,
        Bin16 => 0.0072,
        Bin21 => 0.0075,
        Bin22 => 0.0072,
        Bin23 => 0.0068,
        Bin24 => 0.0064,
        Bin25 => 0.0060,
        Bin26 => 0.0056,
        Bin27 => 0.0052,
        Bin28 => 0.0048,
        Bin33 => 0.0058,
        Bin34 => 0.0054,
        Bin35 => 0.0050,
        Bin36 => 0.0047,
        Bin37 => 0.0044,
        Bin38 => 0.0041,
    }
}

impl FleetSpec {
    pub fn baseline(&self, bin: OperatingBin) -> f64 {
        self.baseline
            .get(&bin)
            .copied()
            .unwrap_or_else(|| default_baseline(bin))
    }

    pub fn n_high_emitters(&self) -> usize {
        (self.n_vehicles as f64 * self.he_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        let c = &self.drive_cycle;
        let b = &self.city_box;
        let n = &self.noise;
        if self.n_vehicles == 0 {
            return bad("n_vehicles must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.he_fraction) {
            return bad("he_fraction must lie in [0, 1]");
        }
        if !(self.he_ratio_multiplier >= 1.0 && self.he_ratio_multiplier.is_finite()) {
            return bad("he_ratio_multiplier must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.corrupt_fraction) {
            return bad("dropout and corrupt_fraction must lie in [0, 1)");
        }
        if [n.ratio, n.fuel, n.maf, n.q1, n.q2, n.rsd, n.speed_kmh]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("noise levels must be finite and non-negative");
        }
        if c.sample_interval_s <= 0 || c.trip_duration_s < 3 * c.sample_interval_s {
            return bad("trip must span at least three samples");
        }
        if !(c.max_speed_kmh > c.cruise_min_kmh && c.cruise_min_kmh >= 0.0) {
            return bad("cruise speed range is empty");
        }
        if c.idle_s.0 > c.idle_s.1
            || c.cruise_s.0 > c.cruise_s.1
            || c.legs.0 > c.legs.1
            || c.legs.0 == 0
        {
            return bad("drive cycle ranges must be ordered and legs >= 1");
        }
        for (lo, hi) in [c.accel, c.decel, c.brake] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad("acceleration ranges must be positive and ordered");
            }
        }
        if !(0.0..=1.0).contains(&c.brake_probability) {
            return bad("brake_probability must lie in [0, 1]");
        }
        if !(b.lat_min < b.lat_max
            && b.lon_min < b.lon_max
            && b.lat_min > -85.0
            && b.lat_max < 85.0)
            || !(b.lon_min >= -180.0 && b.lon_max <= 180.0)
        {
            return bad("city_box is not a valid bounding box");
        }
        if self.campaign_days < self.trips_per_vehicle as i64 || self.campaign_days < 1 {
            return bad("campaign_days must cover one trip per day");
        }
        if self.trip_start_hours.0 >= self.trip_start_hours.1 || self.trip_start_hours.1 > 24 {
            return bad("trip_start_hours must be an ordered range within a day");
        }
        if self.rsd_sites == 0
            || !(self.plume_co2_ppm.0 > 0.0 && self.plume_co2_ppm.0 <= self.plume_co2_ppm.1)
        {
            return bad("rsd_sites and plume_co2_ppm must be positive");
        }
        if [
            self.mean_q1,
            self.mean_q2,
            self.mass_t,
            self.idle_fuel_lh,
            self.fuel_per_kwh,
            self.air_fuel_ratio,
        ]
        .iter()
        .any(|v| !(v.is_finite() && *v >= 0.0))
            || self.idle_fuel_lh <= 0.0
        {
            return bad("fuel model parameters must be non-negative, idle fuel positive");
        }
        if self.baseline.values().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("baseline ratios must be positive");
        }
        Ok(())
    }
}

/// Expected vs. generated bookkeeping for one trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripTruth {
    pub vehicle_id: String,
    pub start: UnixSeconds,
    pub end: UnixSeconds,
    /// Rows that survive parsing.
    pub n_records: usize,
    pub n_dropped: usize,
    pub n_corrupted: usize,
    pub gap_fraction: f64,
    pub expected_accept: bool,
    pub reject_reason: Option<RejectReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinTruth {
    pub bin: OperatingBin,
    pub n_records: usize,
    /// Mean of the noise-free generator ratio over the bin's records.
    pub expected_mean: f64,
    pub nbv_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeTruth {
    pub range: SpeedRange,
    /// Segment distance of all vehicles, km.
    pub distance_km: f64,
    /// Segment distance of planted high emitters, km.
    pub he_distance_km: f64,
    pub nbv_passes: usize,
    pub he_passes: usize,
    /// Noise-free mean ratio over the NBV passes in the range.
    pub nbv_expected_q3: Option<f64>,
    pub he_expected_q3: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticReduction {
    pub reduction_g: f64,
    pub counterfactual_g: f64,
    pub relative_pct: f64,
    /// f(m-1) / (f m + 1 - f) for high-emitter share f and multiplier m.
    pub closed_form_pct: f64,
}

/// Ground truth written next to the generated files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub n_vehicles: usize,
    pub he_fraction: f64,
    pub he_ratio_multiplier: f64,
    pub he_vehicle_ids: Vec<String>,
    pub n_obm_rows: usize,
    pub n_rsd_passes: usize,
    pub corrupted_rows: usize,
    pub dropped_records: usize,
    /// Trapezoid integral of fuel rate over the parsed series, L.
    pub total_fuel_l: f64,
    /// Trapezoid integral of speed over the parsed series, km.
    pub total_distance_km: f64,
    pub fuel_consumption_l_per_km: f64,
    pub mean_q1: f64,
    pub mean_q2: f64,
    pub bins: Vec<BinTruth>,
    pub ranges: Vec<RangeTruth>,
    pub trips: Vec<TripTruth>,
    pub analytic: AnalyticReduction,
}

impl GroundTruth {
    pub fn he_set(&self) -> BTreeSet<&str> {
        self.he_vehicle_ids.iter().map(String::as_str).collect()
    }

    pub fn bin(&self, bin: OperatingBin) -> Option<&BinTruth> {
        self.bins.iter().find(|b| b.bin == bin)
    }
}

/// A generated OBM row; `corrupt` rows are written with a malformed speed.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRow {
    pub record: ObmRecord,
    pub corrupt: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFleet {
    /// Ordered by vehicle, then time.
    pub obm: Vec<SyntheticRow>,
    /// Ordered by vehicle, then time.
    pub rsd: Vec<RsdPass>,
    pub truth: GroundTruth,
}

fn vehicle_id(i: usize) -> String {
    format!("TRK{:05}", i + 1)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn mean_one_lognormal(rel_std: f64) -> Option<LogNormal<f64>> {
    if rel_std <= 0.0 {
        return None;
    }
    let s2 = (1.0 + rel_std * rel_std).ln();
    LogNormal::new(-s2 / 2.0, s2.sqrt()).ok()
}

fn draw(rng: &mut ChaCha8Rng, d: &Option<LogNormal<f64>>) -> f64 {
    d.as_ref().map_or(1.0, |d| d.sample(rng))
}

/// Speed series on the sample grid, km/h.
fn drive_cycle(rng: &mut ChaCha8Rng, c: &DriveCycle, jitter: f64) -> Vec<f64> {
    let n = (c.trip_duration_s / c.sample_interval_s) as usize + 1;
    let dt = c.sample_interval_s as f64;
    let jitter = Normal::new(0.0, jitter.max(0.0)).ok();
    let mut out: Vec<f64> = Vec::with_capacity(n + 64);
    let mut v = 0.0_f64;

    let ramp = |out: &mut Vec<f64>, v: &mut f64, target: f64, accel: f64| {
        let step = accel * dt * 3.6;
        while (*v - target).abs() > 1e-9 {
            *v = if *v < target {
                (*v + step).min(target)
            } else {
                (*v - step).max(target)
            };
            out.push(*v);
        }
    };

    while out.len() < n {
        let idle = rng.random_range(c.idle_s.0..=c.idle_s.1) / c.sample_interval_s;
        out.extend(std::iter::repeat_n(0.0, idle.max(1) as usize));
        let legs = rng.random_range(c.legs.0..=c.legs.1);
        for _ in 0..legs {
            let target = uniform(rng, (c.cruise_min_kmh, c.max_speed_kmh));
            let a = if target > v {
                uniform(rng, c.accel)
            } else {
                uniform(rng, c.decel)
            };
            ramp(&mut out, &mut v, target, a);
            let hold = rng.random_range(c.cruise_s.0..=c.cruise_s.1) / c.sample_interval_s;
            for _ in 0..hold {
                let dv = jitter.as_ref().map_or(0.0, |j| j.sample(rng));
                out.push((target + dv).clamp(0.0, c.max_speed_kmh));
            }
            v = target;
        }
        let a = if rng.random_bool(c.brake_probability) {
            uniform(rng, c.brake)
        } else {
            uniform(rng, c.decel)
        };
        ramp(&mut out, &mut v, 0.0, a);
    }
    out.truncate(n);
    out
}

/// Local metric frame centred on the city box.
struct Frame {
    lat0: f64,
    lon0: f64,
    half_w: f64,
    half_h: f64,
    m_per_deg_lon: f64,
}

impl Frame {
    const M_PER_DEG_LAT: f64 = 110_540.0;

    fn new(b: &CityBox) -> Self {
        let lat0 = (b.lat_min + b.lat_max) / 2.0;
        let lon0 = (b.lon_min + b.lon_max) / 2.0;
        let m_per_deg_lon = 111_320.0 * lat0.to_radians().cos();
        Self {
            lat0,
            lon0,
            half_w: (b.lon_max - b.lon_min) / 2.0 * m_per_deg_lon,
            half_h: (b.lat_max - b.lat_min) / 2.0 * Self::M_PER_DEG_LAT,
            m_per_deg_lon,
        }
    }

    fn degrees(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.lat0 + y / Self::M_PER_DEG_LAT,
            self.lon0 + x / self.m_per_deg_lon,
        )
    }
}

fn reflect(pos: &mut f64, dir: &mut f64, half: f64) {
    for _ in 0..4 {
        if *pos > half {
            *pos = 2.0 * half - *pos;
            *dir = -*dir;
        } else if *pos < -half {
            *pos = -2.0 * half - *pos;
            *dir = -*dir;
        } else {
            break;
        }
    }
    *pos = pos.clamp(-half, half);
}

/// One generated trip before dropout.
struct RawTrip {
    records: Vec<ObmRecord>,
    bins: Vec<OperatingBin>,
    accel: Vec<f64>,
    expected_ratio: Vec<f64>,
}

struct VehicleOutput {
    rows: Vec<SyntheticRow>,
    passes: Vec<RsdPass>,
    pass_expected: Vec<(SpeedRange, f64)>,
    /// Per kept record: (bin, expected ratio).
    record_truth: Vec<(OperatingBin, f64)>,
    trips: Vec<TripTruth>,
    /// (range, km) per segment of the parsed series.
    segments: Vec<(Option<SpeedRange>, f64)>,
    fuel_l: f64,
    distance_km: f64,
    dropped: usize,
    corrupted: usize,
}

fn generate_vehicle(spec: &FleetSpec, index: usize, is_he: bool) -> VehicleOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let id = vehicle_id(index);
    let c = FuelConstants::default();
    let vp = VspParams::default();
    let cycle = &spec.drive_cycle;
    let frame = Frame::new(&spec.city_box);
    let mult = if is_he { spec.he_ratio_multiplier } else { 1.0 };
    let ratio_noise = mean_one_lognormal(spec.noise.ratio);
    let fuel_noise = mean_one_lognormal(spec.noise.fuel);
    let maf_noise = mean_one_lognormal(spec.noise.maf);
    let rsd_noise = mean_one_lognormal(spec.noise.rsd);
    let q1_noise = mean_one_lognormal(spec.noise.q1);
    let q2_noise = mean_one_lognormal(spec.noise.q2);
    let criteria = TripCriteria::default();

    let mut days: Vec<i64> = (0..spec.campaign_days).collect();
    days.shuffle(&mut rng);
    let mut days: Vec<i64> = days.into_iter().take(spec.trips_per_vehicle).collect();
    days.sort_unstable();

    let mut out = VehicleOutput {
        rows: Vec::new(),
        passes: Vec::new(),
        pass_expected: Vec::new(),
        record_truth: Vec::new(),
        trips: Vec::new(),
        segments: Vec::new(),
        fuel_l: 0.0,
        distance_km: 0.0,
        dropped: 0,
        corrupted: 0,
    };
    let mut raw_trips = Vec::new();

    for day in days {
        let hour = rng.random_range(spec.trip_start_hours.0..spec.trip_start_hours.1) as i64;
        let start = spec.start_epoch + day * 86_400 + hour * 3600 + rng.random_range(0..3600);
        let speeds = drive_cycle(&mut rng, cycle, spec.noise.speed_kmh);

        let mut x = uniform(&mut rng, (-frame.half_w, frame.half_w));
        let mut y = uniform(&mut rng, (-frame.half_h, frame.half_h));
        let heading = uniform(&mut rng, (0.0, std::f64::consts::TAU));
        let (mut dx, mut dy) = (heading.cos(), heading.sin());

        let mut records = Vec::with_capacity(speeds.len());
        for (k, &v) in speeds.iter().enumerate() {
            if k > 0 {
                let step_m = (speeds[k - 1] + v) / 2.0 / 3.6 * cycle.sample_interval_s as f64;
                x += dx * step_m;
                y += dy * step_m;
                reflect(&mut x, &mut dx, frame.half_w);
                reflect(&mut y, &mut dy, frame.half_h);
            }
            let (lat, lon) = frame.degrees(x, y);
            records.push(ObmRecord {
                vehicle_id: id.clone(),
                timestamp: start + k as i64 * cycle.sample_interval_s,
                speed: v,
                nox_out: 0.0,
                q_maf: 0.0,
                q_fr: 0.0,
                lat,
                lon,
                scr_temp: None,
                tank_level: None,
                valid: true,
            });
        }

        // State labels use the same estimator the pipeline applies.
        let trip = Trip::from_records(id.clone(), records, SegmentParams::default().gap_interval_s);
        let accel: Vec<f64> = estimate_acceleration(&trip)
            .map(|a| a.into_iter().map(|e| e.accel).collect())
            .unwrap_or_else(|_| vec![0.0; trip.records.len()]);
        let mut records = trip.records;
        let mut bins = Vec::with_capacity(records.len());
        let mut expected_ratio = Vec::with_capacity(records.len());
        let tank0 = uniform(&mut rng, (40.0, 95.0));
        for (k, r) in records.iter_mut().enumerate() {
            let (bin, power) =
                classify_state(r.speed, accel[k], &vp).unwrap_or((OperatingBin::Bin1, 0.0));
            let q_fr = ((spec.idle_fuel_lh + spec.fuel_per_kwh * spec.mass_t * power.max(0.0))
                * draw(&mut rng, &fuel_noise))
            .clamp(0.1, 180.0);
            let q_maf = (q_fr * c.rho * spec.air_fuel_ratio + 50.0) * draw(&mut rng, &maf_noise);
            let expected = spec.baseline(bin) * mult;
            let ratio = expected * draw(&mut rng, &ratio_noise);
            let q_t = exhaust_mass_flow(q_maf, q_fr, &c);
            r.q_fr = q_fr;
            r.q_maf = q_maf;
            r.nox_out = ratio * q_fr * c.beta / (c.mu * q_t);
            r.scr_temp = Some((180.0 + 12.0 * power.max(0.0)).min(450.0));
            r.tank_level = Some((tank0 - 0.004 * k as f64).max(1.0));
            bins.push(bin);
            expected_ratio.push(expected);
        }
        raw_trips.push(RawTrip {
            records,
            bins,
            accel,
            expected_ratio,
        });
    }

    // Remote-sensing passes: instants of this vehicle's driving at speed.
    let candidates: Vec<(usize, usize)> = raw_trips
        .iter()
        .enumerate()
        .flat_map(|(t, raw)| {
            (0..raw.records.len())
                .filter(move |&k| {
                    raw.records[k].speed >= spec.rsd_min_speed_kmh
                        && !matches!(
                            raw.bins[k].speed_class(),
                            SpeedClass::Braking | SpeedClass::Idle
                        )
                })
                .map(move |k| (t, k))
        })
        .collect();
    if !candidates.is_empty() {
        let mut taken_ts = BTreeSet::new();
        for _ in 0..spec.passes_per_vehicle {
            let (t, k) = candidates[rng.random_range(0..candidates.len())];
            let raw = &raw_trips[t];
            let rec = &raw.records[k];
            let bin = raw.bins[k];
            let range = bin.speed_class().range().expect("screenable bin");
            let expected = spec.baseline(bin) * mult;
            let ratio = expected * draw(&mut rng, &rsd_noise);
            let q3_raw = ratio * (1.0 - c.f_no2);
            let co2 = uniform(&mut rng, spec.plume_co2_ppm);
            let time_of_day = (rec.timestamp - spec.start_epoch).rem_euclid(86_400);
            let mut ts =
                spec.start_epoch + rng.random_range(0..spec.campaign_days) * 86_400 + time_of_day;
            while !taken_ts.insert(ts) {
                ts += 1;
            }
            out.passes.push(RsdPass {
                vehicle_id: id.clone(),
                timestamp: ts,
                site_id: format!("S{:02}", rng.random_range(0..spec.rsd_sites) + 1),
                speed: rec.speed,
                accel: raw.accel[k],
                no_ppm: q3_raw * co2,
                q1: spec.mean_q1 * draw(&mut rng, &q1_noise),
                q2: spec.mean_q2 * draw(&mut rng, &q2_noise),
                q3_raw,
                emission_standard: EmissionStandard::ChinaV,
                fuel_type: FuelType::Diesel,
            });
            out.pass_expected.push((range, expected));
        }
        let mut order: Vec<usize> = (0..out.passes.len()).collect();
        order.sort_by_key(|&i| out.passes[i].timestamp);
        out.passes = order.iter().map(|&i| out.passes[i].clone()).collect();
        out.pass_expected = order.iter().map(|&i| out.pass_expected[i]).collect();
    }

    // Dropout, corruption and bookkeeping of what ingest will see.
    for raw in raw_trips {
        let n = raw.records.len();
        let mut kept: Vec<usize> = Vec::with_capacity(n);
        let mut trip_dropped = 0;
        let mut trip_corrupt = 0;
        for k in 0..n {
            let interior = k > 0 && k + 1 < n;
            if interior && spec.dropout > 0.0 && rng.random_bool(spec.dropout) {
                trip_dropped += 1;
                continue;
            }
            let corrupt = spec.corrupt_fraction > 0.0 && rng.random_bool(spec.corrupt_fraction);
            out.rows.push(SyntheticRow {
                record: raw.records[k].clone(),
                corrupt,
            });
            if corrupt {
                trip_corrupt += 1;
            } else {
                kept.push(k);
            }
        }
        out.dropped += trip_dropped;
        out.corrupted += trip_corrupt;

        let recs: Vec<ObmRecord> = kept.iter().map(|&k| raw.records[k].clone()).collect();
        let trip = Trip::from_records(id.clone(), recs, SegmentParams::default().gap_interval_s);
        let reason = criteria.check(&trip);
        out.trips.push(TripTruth {
            vehicle_id: id.clone(),
            start: trip.start,
            end: trip.end,
            n_records: trip.records.len(),
            n_dropped: trip_dropped,
            n_corrupted: trip_corrupt,
            gap_fraction: trip.gap_fraction,
            expected_accept: reason.is_none(),
            reject_reason: reason,
        });
        if reason.is_some() {
            continue;
        }
        for &k in &kept {
            out.record_truth.push((raw.bins[k], raw.expected_ratio[k]));
        }
        for w in kept.windows(2) {
            let (a, b) = (&raw.records[w[0]], &raw.records[w[1]]);
            let dt_h = (b.timestamp - a.timestamp) as f64 / 3600.0;
            out.fuel_l += (a.q_fr + b.q_fr) / 2.0 * dt_h;
            out.distance_km += (a.speed + b.speed) / 2.0 * dt_h;
            let range = raw.bins[w[0]].speed_class().range();
            out.segments
                .push((range, traversal_distance(a.lat, a.lon, b.lat, b.lon)));
        }
    }
    out
}

/// Generates the full fleet.
pub fn generate(spec: &FleetSpec) -> Result<SyntheticFleet, SynthError> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    master.set_stream(0);
    let mut order: Vec<usize> = (0..spec.n_vehicles).collect();
    order.shuffle(&mut master);
    let he: BTreeSet<usize> = order.into_iter().take(spec.n_high_emitters()).collect();

    let outputs: Vec<VehicleOutput> = (0..spec.n_vehicles)
        .map(|i| generate_vehicle(spec, i, he.contains(&i)))
        .collect();
    Ok(assemble(spec, &he, outputs))
}

fn assemble(spec: &FleetSpec, he: &BTreeSet<usize>, outputs: Vec<VehicleOutput>) -> SyntheticFleet {
    let mut obm = Vec::new();
    let mut rsd = Vec::new();
    let mut trips = Vec::new();
    let mut bin_sums: BTreeMap<OperatingBin, (usize, f64)> = BTreeMap::new();
    let mut ranges: BTreeMap<SpeedRange, RangeTruth> = SpeedRange::ALL
        .into_iter()
        .map(|r| {
            (
                r,
                RangeTruth {
                    range: r,
                    distance_km: 0.0,
                    he_distance_km: 0.0,
                    nbv_passes: 0,
                    he_passes: 0,
                    nbv_expected_q3: None,
                    he_expected_q3: None,
                },
            )
        })
        .collect();
    let mut q3_sums: BTreeMap<(SpeedRange, bool), f64> = BTreeMap::new();
    let (mut fuel, mut distance, mut dropped, mut corrupted) = (0.0, 0.0, 0, 0);

    for (i, out) in outputs.into_iter().enumerate() {
        let is_he = he.contains(&i);
        for (bin, e) in &out.record_truth {
            let s = bin_sums.entry(*bin).or_default();
            s.0 += 1;
            s.1 += e;
        }
        for (range, km) in &out.segments {
            if let Some(r) = range {
                let t = ranges.get_mut(r).expect("all ranges present");
                t.distance_km += km;
                if is_he {
                    t.he_distance_km += km;
                }
            }
        }
        for (range, e) in &out.pass_expected {
            let t = ranges.get_mut(range).expect("all ranges present");
            if is_he {
                t.he_passes += 1;
            } else {
                t.nbv_passes += 1;
            }
            *q3_sums.entry((*range, is_he)).or_default() += e;
        }
        fuel += out.fuel_l;
        distance += out.distance_km;
        dropped += out.dropped;
        corrupted += out.corrupted;
        obm.extend(out.rows);
        rsd.extend(out.passes);
        trips.extend(out.trips);
    }
    for t in ranges.values_mut() {
        let mean = |n: usize, he: bool| (n > 0).then(|| q3_sums[&(t.range, he)] / n as f64);
        t.nbv_expected_q3 = mean(t.nbv_passes, false);
        t.he_expected_q3 = mean(t.he_passes, true);
    }

    let fc = if distance > 0.0 { fuel / distance } else { 0.0 };
    let bins = OperatingBin::ALL
        .into_iter()
        .map(|bin| {
            let (n, sum) = bin_sums.get(&bin).copied().unwrap_or_default();
            BinTruth {
                bin,
                n_records: n,
                expected_mean: if n > 0 { sum / n as f64 } else { 0.0 },
                nbv_baseline: spec.baseline(bin),
            }
        })
        .collect();
    let ranges: Vec<RangeTruth> = ranges.into_values().collect();
    let mut truth = GroundTruth {
        seed: spec.seed,
        n_vehicles: spec.n_vehicles,
        he_fraction: spec.he_fraction,
        he_ratio_multiplier: spec.he_ratio_multiplier,
        he_vehicle_ids: he.iter().map(|&i| vehicle_id(i)).collect(),
        n_obm_rows: obm.len(),
        n_rsd_passes: rsd.len(),
        corrupted_rows: corrupted,
        dropped_records: dropped,
        total_fuel_l: fuel,
        total_distance_km: distance,
        fuel_consumption_l_per_km: fc,
        mean_q1: spec.mean_q1,
        mean_q2: spec.mean_q2,
        bins,
        ranges,
        trips,
        analytic: AnalyticReduction {
            reduction_g: 0.0,
            counterfactual_g: 0.0,
            relative_pct: 0.0,
            closed_form_pct: 0.0,
        },
    };
    truth.analytic = analytic_reduction(spec, &truth);
    SyntheticFleet { obm, rsd, truth }
}

/// Expected reduction if planted high emitters behaved like the rest of the
/// fleet. A high emitter's ratio is the multiplier times the NBV ratio in
/// every bin, so per speed range with NBV passes the factor gap is
/// `(m - 1) * ef_nbv`.
pub fn analytic_reduction(spec: &FleetSpec, truth: &GroundTruth) -> AnalyticReduction {
    let c = FuelConstants::default();
    let fc = truth.fuel_consumption_l_per_km;
    let ef = |q3: f64| fuel_specific_ef(truth.mean_q1, truth.mean_q2, q3) * fc * c.rho;
    let (mut reduction, mut baseline) = (0.0, 0.0);
    for r in &truth.ranges {
        let Some(nbv_q3) = r.nbv_expected_q3 else {
            continue;
        };
        let ef_nbv = ef(nbv_q3);
        reduction += r.he_distance_km * (spec.he_ratio_multiplier - 1.0) * ef_nbv;
        baseline += r.distance_km * ef_nbv;
    }
    let f = if spec.n_vehicles > 0 {
        spec.n_high_emitters() as f64 / spec.n_vehicles as f64
    } else {
        0.0
    };
    let m = spec.he_ratio_multiplier;
    AnalyticReduction {
        reduction_g: reduction,
        counterfactual_g: baseline,
        relative_pct: if reduction + baseline > 0.0 {
            100.0 * reduction / (reduction + baseline)
        } else {
            0.0
        },
        closed_form_pct: 100.0 * f * (m - 1.0) / (f * m + 1.0 - f),
    }
}

/// Paths of a written dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub obm_dir: PathBuf,
    pub rsd_dir: PathBuf,
    pub manifest: PathBuf,
}

pub const VEHICLES_PER_OBM_FILE: usize = 250;

fn iso(ts: UnixSeconds) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|d| d.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| ts.to_string())
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes `obm/`, `rsd/` and `manifest.json` under `dir`, in the default
/// ingest column layout.
pub fn write_dataset(fleet: &SyntheticFleet, dir: &Path) -> Result<DatasetPaths, SynthError> {
    let paths = DatasetPaths {
        obm_dir: dir.join("obm"),
        rsd_dir: dir.join("rsd"),
        manifest: dir.join("manifest.json"),
    };
    fs::create_dir_all(&paths.obm_dir)?;
    fs::create_dir_all(&paths.rsd_dir)?;

    let mut vehicles: Vec<&str> = Vec::new();
    for row in &fleet.obm {
        if vehicles.last() != Some(&row.record.vehicle_id.as_str()) {
            vehicles.push(&row.record.vehicle_id);
        }
    }
    let mut file_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, v) in vehicles.iter().enumerate() {
        file_of.insert(v, i / VEHICLES_PER_OBM_FILE);
    }
    let mut writer: Option<(usize, BufWriter<File>)> = None;
    for row in &fleet.obm {
        let r = &row.record;
        let idx = file_of[r.vehicle_id.as_str()];
        if writer.as_ref().map(|w| w.0) != Some(idx) {
            if let Some((_, mut w)) = writer.take() {
                w.flush()?;
            }
            let mut w = BufWriter::new(File::create(
                paths.obm_dir.join(format!("obm_{idx:03}.csv")),
            )?);
            writeln!(w, "vehicle_id,timestamp,speed_kmh,nox_ppm,maf_kgh,fuel_rate_lh,lat,lon,scr_temp_c,tank_pct")?;
            writer = Some((idx, w));
        }
        let w = &mut writer.as_mut().expect("writer opened above").1;
        let speed = if row.corrupt {
            "ERR".to_string()
        } else {
            r.speed.to_string()
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.vehicle_id,
            iso(r.timestamp),
            speed,
            r.nox_out,
            r.q_maf,
            r.q_fr,
            r.lat,
            r.lon,
            opt(r.scr_temp),
            opt(r.tank_level)
        )?;
    }
    if let Some((_, mut w)) = writer {
        w.flush()?;
    }

    let mut w = BufWriter::new(File::create(paths.rsd_dir.join("passes.csv"))?);
    writeln!(w, "vehicle_id,timestamp,site_id,speed_kmh,accel_ms2,no_ppm,co_co2,hc_co2,no_co2,standard,fuel")?;
    for p in &fleet.rsd {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},China V,{}",
            p.vehicle_id,
            p.timestamp,
            p.site_id,
            p.speed,
            p.accel,
            p.no_ppm,
            p.q1,
            p.q2,
            p.q3_raw,
            p.fuel_type.as_str()
        )?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(&paths.manifest)?);
    serde_json::to_writer_pretty(&mut w, &fleet.truth)?;
    writeln!(w)?;
    w.flush()?;
    Ok(paths)
}

pub fn read_manifest(path: &Path) -> Result<GroundTruth, SynthError> {
    Ok(serde_json::from_reader(io::BufReader::new(File::open(
        path,
    )?))?)
}
