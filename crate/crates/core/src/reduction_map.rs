//! Spatial accumulation of travel and NOx reduction potential on a square
//! grid, split into day and night.
//!
//! Every consecutive pair of records is one segment. Its haversine length is
//! credited to the cell of its midpoint and to the period of its start time.
//! A flagged vehicle's segment in a speed range with both factors contributes
//! `distance * max(0, ef_he - ef_nbv)` grams of reduction. Every segment with
//! an NBV factor contributes `distance * ef_nbv` to the counterfactual, i.e.
//! the fleet's emissions once all flagged vehicles behave normally.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::binning::{classify_state, SpeedRange, VspParams};
use crate::factors::FactorRecord;
use crate::ingest::{AccelEstimate, ObmRecord, Trip, UnixSeconds};
use crate::screening::Method;

const METERS_PER_DEG_LON_EQ: f64 = 111_320.0;
const METERS_PER_DEG_LAT: f64 = 110_540.0;
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("coordinate ({lat}, {lon}) is outside the valid domain")]
    OutOfDomain { lat: f64, lon: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(&'static str),
    #[error("invalid day window: {0}")]
    InvalidWindow(&'static str),
    #[error("bad GeoJSON: {0}")]
    Geojson(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub cell_size_m: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            origin_lat: 30.57,
            origin_lon: 104.06,
            cell_size_m: 200.0,
        }
    }
}

fn valid_coord(lat: f64, lon: f64) -> bool {
    lat.is_finite()
        && lon.is_finite()
        && (-90.0..=90.0).contains(&lat)
        && (-180.0..=180.0).contains(&lon)
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), MapError> {
        if !(self.cell_size_m.is_finite() && self.cell_size_m > 0.0) {
            return Err(MapError::InvalidGrid("cell_size_m must be positive"));
        }
        if !valid_coord(self.origin_lat, self.origin_lon) || self.origin_lat.abs() >= 90.0 {
            return Err(MapError::InvalidGrid("origin is not a valid coordinate"));
        }
        Ok(())
    }

    /// Local east/north offsets from the origin, meters.
    pub fn to_meters(&self, lat: f64, lon: f64) -> Result<(f64, f64), MapError> {
        if !valid_coord(lat, lon) {
            return Err(MapError::OutOfDomain { lat, lon });
        }
        let x =
            (lon - self.origin_lon) * METERS_PER_DEG_LON_EQ * self.origin_lat.to_radians().cos();
        let y = (lat - self.origin_lat) * METERS_PER_DEG_LAT;
        Ok((x, y))
    }

    /// Inverse of [`GridSpec::to_meters`].
    pub fn to_degrees(&self, x: f64, y: f64) -> (f64, f64) {
        let lat = self.origin_lat + y / METERS_PER_DEG_LAT;
        let lon =
            self.origin_lon + x / (METERS_PER_DEG_LON_EQ * self.origin_lat.to_radians().cos());
        (lat, lon)
    }

    /// (lat, lon) of the south-west corner of a cell.
    pub fn cell_corner(&self, ix: i64, iy: i64) -> (f64, f64) {
        self.to_degrees(ix as f64 * self.cell_size_m, iy as f64 * self.cell_size_m)
    }
}

pub fn project(lat: f64, lon: f64, g: &GridSpec) -> Result<(i64, i64), MapError> {
    let (x, y) = g.to_meters(lat, lon)?;
    Ok((
        (x / g.cell_size_m).floor() as i64,
        (y / g.cell_size_m).floor() as i64,
    ))
}

/// Great-circle distance, km.
pub fn traversal_distance(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    Day,
    Night,
}

impl Period {
    pub const ALL: [Period; 2] = [Period::Day, Period::Night];

    pub fn as_str(self) -> &'static str {
        match self {
            Period::Day => "day",
            Period::Night => "night",
        }
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Local daytime hours `[start_hour, end_hour)` at a fixed UTC offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DayWindow {
    pub start_hour: u32,
    pub end_hour: u32,
    pub utc_offset_hours: f64,
}

impl Default for DayWindow {
    fn default() -> Self {
        Self {
            start_hour: 8,
            end_hour: 20,
            utc_offset_hours: 0.0,
        }
    }
}

impl DayWindow {
    pub fn validate(&self) -> Result<(), MapError> {
        if self.start_hour > 24 || self.end_hour > 24 {
            return Err(MapError::InvalidWindow("hours must be within 0..=24"));
        }
        if !(self.utc_offset_hours.is_finite() && self.utc_offset_hours.abs() <= 14.0) {
            return Err(MapError::InvalidWindow("utc offset must be within +/-14 h"));
        }
        Ok(())
    }

    fn local(&self, ts: UnixSeconds) -> i64 {
        ts + (self.utc_offset_hours * 3600.0).round() as i64
    }

    pub fn period(&self, ts: UnixSeconds) -> Period {
        let sec = self.local(ts).rem_euclid(86_400);
        let (start, end) = (
            i64::from(self.start_hour) * 3600,
            i64::from(self.end_hour) * 3600,
        );
        let day = if start <= end {
            (start..end).contains(&sec)
        } else {
            sec >= start || sec < end
        };
        if day {
            Period::Day
        } else {
            Period::Night
        }
    }

    /// Local calendar day number.
    pub fn local_day(&self, ts: UnixSeconds) -> i64 {
        self.local(ts).div_euclid(86_400)
    }
}

/// Distance-specific factors (g/km) of one method per speed range.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorLookup {
    pub by_range: BTreeMap<SpeedRange, (Option<f64>, Option<f64>)>,
}

impl FactorLookup {
    pub fn from_records(records: &[FactorRecord], method: Method) -> Self {
        let by_range = records
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| match r.scope()? {
                crate::factors::Scope::Range(range) => Some((range, (r.ef_nbv, r.ef_he))),
                crate::factors::Scope::Total => None,
            })
            .collect();
        Self { by_range }
    }

    pub fn set(&mut self, range: SpeedRange, ef_nbv: f64, ef_he: f64) {
        self.by_range.insert(range, (Some(ef_nbv), Some(ef_he)));
    }

    pub fn nbv(&self, range: SpeedRange) -> Option<f64> {
        self.by_range.get(&range).and_then(|f| f.0)
    }

    pub fn he(&self, range: SpeedRange) -> Option<f64> {
        self.by_range.get(&range).and_then(|f| f.1)
    }
}

/// What a segment contributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentDisposition {
    /// Flagged vehicle with both factors available.
    Reduced,
    /// Unflagged vehicle with an NBV factor.
    Baseline,
    /// Braking or idle: distance only.
    NoRange,
    /// The segment's speed range lacks a needed factor: distance only.
    MissingFactor,
    /// Unusable coordinates, timestamps or speed: skipped.
    Invalid,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CellTotals {
    /// Travel of flagged vehicles, km.
    pub distance_he_km: f64,
    /// Travel of all vehicles, km.
    pub distance_all_km: f64,
    /// Grams saved if flagged vehicles emitted at NBV level.
    pub reduction_g: f64,
    /// Counterfactual NBV-level emissions of all travel, g.
    pub baseline_g: f64,
}

impl CellTotals {
    fn add(&mut self, o: &CellTotals) {
        self.distance_he_km += o.distance_he_km;
        self.distance_all_km += o.distance_all_km;
        self.reduction_g += o.reduction_g;
        self.baseline_g += o.baseline_g;
    }

    /// reduction / (reduction + counterfactual); zero when nothing was emitted.
    pub fn relative_savings(&self) -> f64 {
        let denom = self.reduction_g + self.baseline_g;
        if denom > 0.0 {
            self.reduction_g / denom
        } else {
            0.0
        }
    }
}

/// One exported grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionCell {
    pub ix: i64,
    pub iy: i64,
    pub period: Period,
    #[serde(flatten)]
    pub totals: CellTotals,
}

/// Mergeable grid accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ReductionGrid {
    pub spec: GridSpec,
    pub window: DayWindow,
    cells: BTreeMap<(i64, i64, Period), CellTotals>,
    /// Segment-level totals, kept apart from the cells.
    periods: BTreeMap<Period, CellTotals>,
    dispositions: BTreeMap<SegmentDisposition, usize>,
    flagged_vehicles: BTreeSet<String>,
    fleet_vehicles: BTreeSet<String>,
    days: BTreeSet<i64>,
}

impl ReductionGrid {
    pub fn new(spec: GridSpec, window: DayWindow) -> Self {
        Self {
            spec,
            window,
            cells: BTreeMap::new(),
            periods: BTreeMap::new(),
            dispositions: BTreeMap::new(),
            flagged_vehicles: BTreeSet::new(),
            fleet_vehicles: BTreeSet::new(),
            days: BTreeSet::new(),
        }
    }

    fn add_segment(
        &mut self,
        a: &ObmRecord,
        b: &ObmRecord,
        accel: f64,
        flagged: bool,
        factors: &FactorLookup,
        vp: &VspParams,
    ) -> SegmentDisposition {
        if b.timestamp <= a.timestamp || !valid_coord(a.lat, a.lon) || !valid_coord(b.lat, b.lon) {
            return SegmentDisposition::Invalid;
        }
        let (mid_lat, mid_lon) = ((a.lat + b.lat) / 2.0, (a.lon + b.lon) / 2.0);
        let Ok((ix, iy)) = project(mid_lat, mid_lon, &self.spec) else {
            return SegmentDisposition::Invalid;
        };
        let Ok((bin, _)) = classify_state(a.speed, accel, vp) else {
            return SegmentDisposition::Invalid;
        };
        let d = traversal_distance(a.lat, a.lon, b.lat, b.lon);
        let mut add = CellTotals {
            distance_he_km: if flagged { d } else { 0.0 },
            distance_all_km: d,
            ..Default::default()
        };
        let disposition = match bin.speed_class().range() {
            None => SegmentDisposition::NoRange,
            Some(range) => match (factors.nbv(range), factors.he(range)) {
                (Some(nbv), Some(he)) if flagged => {
                    add.reduction_g = d * (he - nbv).max(0.0);
                    add.baseline_g = d * nbv;
                    SegmentDisposition::Reduced
                }
                (Some(nbv), _) if !flagged => {
                    add.baseline_g = d * nbv;
                    SegmentDisposition::Baseline
                }
                _ => SegmentDisposition::MissingFactor,
            },
        };
        let period = self.window.period(a.timestamp);
        self.cells.entry((ix, iy, period)).or_default().add(&add);
        self.periods.entry(period).or_default().add(&add);
        self.days.insert(self.window.local_day(a.timestamp));
        disposition
    }

    /// Adds every segment of a trip. `accel` holds one estimate per record.
    pub fn add_trip(
        &mut self,
        trip: &Trip,
        accel: &[AccelEstimate],
        flagged: bool,
        factors: &FactorLookup,
        vp: &VspParams,
    ) {
        self.fleet_vehicles.insert(trip.vehicle_id.clone());
        if flagged {
            self.flagged_vehicles.insert(trip.vehicle_id.clone());
        }
        for (i, w) in trip.records.windows(2).enumerate() {
            let a = accel.get(i).map_or(0.0, |e| e.accel);
            let d = self.add_segment(&w[0], &w[1], a, flagged, factors, vp);
            *self.dispositions.entry(d).or_default() += 1;
        }
    }

    pub fn merge(&mut self, other: ReductionGrid) {
        for (k, v) in other.cells {
            self.cells.entry(k).or_default().add(&v);
        }
        for (k, v) in other.periods {
            self.periods.entry(k).or_default().add(&v);
        }
        for (k, v) in other.dispositions {
            *self.dispositions.entry(k).or_default() += v;
        }
        self.flagged_vehicles.extend(other.flagged_vehicles);
        self.fleet_vehicles.extend(other.fleet_vehicles);
        self.days.extend(other.days);
    }

    pub fn cells(&self) -> Vec<ReductionCell> {
        self.cells
            .iter()
            .map(|(&(ix, iy, period), &totals)| ReductionCell {
                ix,
                iy,
                period,
                totals,
            })
            .collect()
    }

    /// Segment-level totals of one period.
    pub fn period_totals(&self, period: Period) -> CellTotals {
        self.periods.get(&period).copied().unwrap_or_default()
    }

    /// Day plus night.
    pub fn totals(&self) -> CellTotals {
        let mut t = self.period_totals(Period::Day);
        t.add(&self.period_totals(Period::Night));
        t
    }

    pub fn dispositions(&self) -> &BTreeMap<SegmentDisposition, usize> {
        &self.dispositions
    }

    pub fn summary(&self) -> MapSummary {
        let per = |total: f64, n: usize| if n > 0 { total / n as f64 } else { 0.0 };
        let days = self.days.len();
        let periods = Period::ALL
            .into_iter()
            .map(|p| {
                let t = self.period_totals(p);
                PeriodSummary {
                    period: p,
                    relative_savings_pct: 100.0 * t.relative_savings(),
                    reduction_per_flagged_vehicle_day_g: per(
                        per(t.reduction_g, self.flagged_vehicles.len()),
                        days,
                    ),
                    reduction_per_fleet_vehicle_day_g: per(
                        per(t.reduction_g, self.fleet_vehicles.len()),
                        days,
                    ),
                    totals: t,
                }
            })
            .collect();
        let t = self.totals();
        MapSummary {
            n_cells: self.cells.len(),
            n_flagged_vehicles: self.flagged_vehicles.len(),
            n_fleet_vehicles: self.fleet_vehicles.len(),
            days_observed: days,
            relative_savings_pct: 100.0 * t.relative_savings(),
            totals: t,
            periods,
            segments: self.dispositions.iter().map(|(k, v)| (*k, *v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodSummary {
    pub period: Period,
    pub totals: CellTotals,
    pub relative_savings_pct: f64,
    pub reduction_per_flagged_vehicle_day_g: f64,
    pub reduction_per_fleet_vehicle_day_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub n_cells: usize,
    pub n_flagged_vehicles: usize,
    pub n_fleet_vehicles: usize,
    pub days_observed: usize,
    pub totals: CellTotals,
    pub relative_savings_pct: f64,
    pub periods: Vec<PeriodSummary>,
    pub segments: Vec<(SegmentDisposition, usize)>,
}

impl fmt::Display for MapSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cells: {}", self.n_cells)?;
        writeln!(
            f,
            "vehicles: {} flagged of {} ({} days)",
            self.n_flagged_vehicles, self.n_fleet_vehicles, self.days_observed
        )?;
        for p in &self.periods {
            writeln!(
                f,
                "{}: reduction {:.1} g over {:.2} km flagged travel, savings {:.2}%, per flagged vehicle-day {:.2} g, per fleet vehicle-day {:.2} g",
                p.period,
                p.totals.reduction_g,
                p.totals.distance_he_km,
                p.relative_savings_pct,
                p.reduction_per_flagged_vehicle_day_g,
                p.reduction_per_fleet_vehicle_day_g
            )?;
        }
        writeln!(
            f,
            "total: reduction {:.1} g, counterfactual {:.1} g, relative savings {:.2}%",
            self.totals.reduction_g, self.totals.baseline_g, self.relative_savings_pct
        )
    }
}

/// One square polygon per cell, ring counter-clockwise in lon,lat order.
pub fn export_geojson(cells: &[ReductionCell], spec: &GridSpec) -> Value {
    let features: Vec<Value> = cells
        .iter()
        .map(|c| {
            let corner = |dx: i64, dy: i64| {
                let (lat, lon) = spec.cell_corner(c.ix + dx, c.iy + dy);
                json!([lon, lat])
            };
            json!({
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1), corner(0, 0)]],
                },
                "properties": {
                    "ix": c.ix,
                    "iy": c.iy,
                    "period": c.period,
                    "distance_km": c.totals.distance_he_km,
                    "reduction_g": c.totals.reduction_g,
                    "distance_all_km": c.totals.distance_all_km,
                    "baseline_g": c.totals.baseline_g,
                },
            })
        })
        .collect();
    json!({ "type": "FeatureCollection", "features": features })
}

pub fn parse_geojson(text: &str) -> Result<Vec<ReductionCell>, MapError> {
    #[derive(Deserialize)]
    struct Props {
        ix: i64,
        iy: i64,
        period: Period,
        distance_km: f64,
        reduction_g: f64,
        distance_all_km: f64,
        baseline_g: f64,
    }
    let bad = |e: &dyn fmt::Display| MapError::Geojson(e.to_string());
    let doc: Value = serde_json::from_str(text).map_err(|e| bad(&e))?;
    if doc["type"] != "FeatureCollection" {
        return Err(MapError::Geojson("not a FeatureCollection".into()));
    }
    let features = doc["features"]
        .as_array()
        .ok_or_else(|| bad(&"missing features"))?;
    features
        .iter()
        .map(|f| {
            let p: Props = serde_json::from_value(f["properties"].clone()).map_err(|e| bad(&e))?;
            Ok(ReductionCell {
                ix: p.ix,
                iy: p.iy,
                period: p.period,
                totals: CellTotals {
                    distance_he_km: p.distance_km,
                    distance_all_km: p.distance_all_km,
                    reduction_g: p.reduction_g,
                    baseline_g: p.baseline_g,
                },
            })
        })
        .collect()
}

#[derive(Serialize)]
struct CellRow {
    ix: i64,
    iy: i64,
    period: Period,
    distance_km: f64,
    reduction_g: f64,
    distance_all_km: f64,
    baseline_g: f64,
}

pub fn write_cells_csv<W: Write>(w: W, cells: &[ReductionCell]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for c in cells {
        out.serialize(CellRow {
            ix: c.ix,
            iy: c.iy,
            period: c.period,
            distance_km: c.totals.distance_he_km,
            reduction_g: c.totals.reduction_g,
            distance_all_km: c.totals.distance_all_km,
            baseline_g: c.totals.baseline_g,
        })?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Trip;

    fn rec(t: i64, lat: f64, lon: f64, speed: f64) -> ObmRecord {
        ObmRecord {
            vehicle_id: "V".into(),
            timestamp: t,
            speed,
            nox_out: 300.0,
            q_maf: 400.0,
            q_fr: 20.0,
            lat,
            lon,
            scr_temp: None,
            tank_level: None,
            valid: true,
        }
    }

    fn origin() -> GridSpec {
        GridSpec {
            origin_lat: 0.0,
            origin_lon: 0.0,
            cell_size_m: 200.0,
        }
    }

    #[test]
    fn projection() {
        let g = GridSpec::default();
        assert_eq!(project(g.origin_lat, g.origin_lon, &g).unwrap(), (0, 0));
        let east = |m: f64| g.origin_lon + m / (111_320.0 * g.origin_lat.to_radians().cos());
        assert_eq!(project(g.origin_lat, east(250.0), &g).unwrap(), (1, 0));
        assert_eq!(project(g.origin_lat, east(199.0), &g).unwrap(), (0, 0));
        assert_eq!(
            project(g.origin_lat - 1e-6, g.origin_lon, &g).unwrap(),
            (0, -1)
        );
        assert!(matches!(
            project(91.0, 0.0, &g),
            Err(MapError::OutOfDomain { .. })
        ));
        assert!(matches!(
            project(f64::NAN, 0.0, &g),
            Err(MapError::OutOfDomain { .. })
        ));
    }

    #[test]
    fn haversine() {
        assert_eq!(traversal_distance(30.0, 104.0, 30.0, 104.0), 0.0);
        let d = traversal_distance(0.0, 0.0, 0.0, 1.0);
        assert!((d - EARTH_RADIUS_KM * 1f64.to_radians()).abs() < 1e-9);
        assert!((d - 111.19).abs() < 0.1);
        let (a, b) = (
            traversal_distance(30.1, 104.2, 30.3, 104.0),
            traversal_distance(30.3, 104.0, 30.1, 104.2),
        );
        assert_eq!(a, b);
    }

    #[test]
    fn day_window() {
        let w = DayWindow::default();
        assert_eq!(w.period(8 * 3600), Period::Day);
        assert_eq!(w.period(8 * 3600 - 1), Period::Night);
        assert_eq!(w.period(20 * 3600), Period::Night);
        let cst = DayWindow {
            utc_offset_hours: 8.0,
            ..Default::default()
        };
        // 00:00 UTC is 08:00 in UTC+8
        assert_eq!(cst.period(0), Period::Day);
        assert_eq!(cst.period(-1), Period::Night);
        let wrap = DayWindow {
            start_hour: 20,
            end_hour: 8,
            ..Default::default()
        };
        assert_eq!(wrap.period(0), Period::Day);
        assert_eq!(wrap.period(12 * 3600), Period::Night);
    }

    /// Straight east-bound run of `km` at 50 km/h starting at `t0`.
    fn eastbound(km: f64, t0: i64) -> Trip {
        let step_s = 10;
        let step_km = 50.0 * step_s as f64 / 3600.0;
        let n = (km / step_km).round() as usize;
        let deg_per_km = 1.0 / (EARTH_RADIUS_KM * 1f64.to_radians());
        let recs = (0..=n)
            .map(|i| {
                rec(
                    t0 + (i as i64) * step_s,
                    0.0,
                    0.0005 + i as f64 * step_km * deg_per_km,
                    50.0,
                )
            })
            .collect();
        Trip::from_records("V", recs, 12)
    }

    fn zero_accel(t: &Trip) -> Vec<AccelEstimate> {
        vec![
            AccelEstimate {
                accel: 0.0,
                low_confidence: false
            };
            t.records.len()
        ]
    }

    fn medium_factors(nbv: f64, he: f64) -> FactorLookup {
        let mut f = FactorLookup::default();
        f.set(SpeedRange::Medium, nbv, he);
        f
    }

    #[test]
    fn ten_km_daytime() {
        let trip = eastbound(10.0, 12 * 3600);
        let (vp, factors) = (VspParams::default(), medium_factors(4.8, 14.2));
        let mut grid = ReductionGrid::new(origin(), DayWindow::default());
        grid.add_trip(&trip, &zero_accel(&trip), true, &factors, &vp);
        let day = grid.period_totals(Period::Day);
        assert!((day.distance_he_km - 10.0).abs() < 1e-6);
        assert!((day.reduction_g - 94.0).abs() < 1e-4);
        assert_eq!(grid.period_totals(Period::Night), CellTotals::default());
        let cell_sum: f64 = grid.cells().iter().map(|c| c.totals.reduction_g).sum();
        assert!((cell_sum - day.reduction_g).abs() <= 1e-9 * day.reduction_g);

        let mut unflagged = ReductionGrid::new(origin(), DayWindow::default());
        unflagged.add_trip(&trip, &zero_accel(&trip), false, &factors, &vp);
        assert_eq!(unflagged.totals().reduction_g, 0.0);
        assert!((unflagged.totals().baseline_g - 48.0).abs() < 1e-4);
    }

    #[test]
    fn equal_factors_give_zero_grid_and_missing_factors_are_reported() {
        let trip = eastbound(2.0, 0);
        let vp = VspParams::default();
        let mut grid = ReductionGrid::new(origin(), DayWindow::default());
        grid.add_trip(
            &trip,
            &zero_accel(&trip),
            true,
            &medium_factors(5.0, 5.0),
            &vp,
        );
        assert!(grid.cells().iter().all(|c| c.totals.reduction_g == 0.0));

        let mut grid = ReductionGrid::new(origin(), DayWindow::default());
        grid.add_trip(
            &trip,
            &zero_accel(&trip),
            true,
            &FactorLookup::default(),
            &vp,
        );
        assert_eq!(grid.totals().reduction_g, 0.0);
        assert!(grid.totals().distance_he_km > 1.9);
        assert!(grid
            .dispositions()
            .contains_key(&SegmentDisposition::MissingFactor));
    }

    #[test]
    fn merge_matches_single_pass() {
        let (a, b) = (eastbound(3.0, 0), eastbound(4.0, 9 * 3600));
        let (vp, f) = (VspParams::default(), medium_factors(4.8, 14.2));
        let mut whole = ReductionGrid::new(origin(), DayWindow::default());
        whole.add_trip(&a, &zero_accel(&a), true, &f, &vp);
        whole.add_trip(&b, &zero_accel(&b), false, &f, &vp);
        let mut left = ReductionGrid::new(origin(), DayWindow::default());
        left.add_trip(&b, &zero_accel(&b), false, &f, &vp);
        let mut right = ReductionGrid::new(origin(), DayWindow::default());
        right.add_trip(&a, &zero_accel(&a), true, &f, &vp);
        left.merge(right);
        assert_eq!(left.cells().len(), whole.cells().len());
        let t = whole.totals();
        assert!((left.totals().reduction_g - t.reduction_g).abs() <= 1e-12 * t.reduction_g);
        assert_eq!(
            t.reduction_g,
            whole.period_totals(Period::Day).reduction_g
                + whole.period_totals(Period::Night).reduction_g
        );
        let s = whole.summary();
        assert_eq!((s.n_flagged_vehicles, s.n_fleet_vehicles), (1, 1));
    }

    #[test]
    fn geojson() {
        let empty = export_geojson(&[], &origin());
        assert_eq!(empty["type"], "FeatureCollection");
        assert_eq!(empty["features"].as_array().unwrap().len(), 0);

        let trip = eastbound(1.0, 0);
        let mut grid = ReductionGrid::new(origin(), DayWindow::default());
        grid.add_trip(
            &trip,
            &zero_accel(&trip),
            true,
            &medium_factors(4.8, 14.2),
            &VspParams::default(),
        );
        let cells = grid.cells();
        let doc = export_geojson(&cells[..1], &origin());
        let ring = doc["features"][0]["geometry"]["coordinates"][0]
            .as_array()
            .unwrap();
        assert_eq!(ring.len(), 5);
        assert_eq!(ring[0], ring[4]);

        let doc = export_geojson(&cells, &origin());
        let back = parse_geojson(&serde_json::to_string(&doc).unwrap()).unwrap();
        assert_eq!(back, cells);
    }
}
