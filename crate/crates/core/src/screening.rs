//! Screening of remote-sensing passes against a fixed concentration limit
//! (`National`) or OBM-derived ratio thresholds (`ObmRsd`), with a rolling
//! per-vehicle exceedance ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::{
    classify_state, BinningError, OperatingBin, SpeedClass, SpeedRange, VspParams,
};
use crate::emissions::{rsd_ratio_from_q3, EmissionsError, FuelConstants};
use crate::ingest::{EmissionStandard, FuelType, RsdPass, UnixSeconds};
use crate::profiling::ThresholdTable;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScreeningError {
    #[error("pass classified as {0}: plume too small to screen")]
    UnscreenableBin(OperatingBin),
    #[error("no threshold for {0}")]
    NoThreshold(OperatingBin),
    #[error(transparent)]
    Binning(#[from] BinningError),
    #[error(transparent)]
    Emissions(#[from] EmissionsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    National,
    ObmRsd,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::National, Method::ObmRsd];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::National => "national",
            Method::ObmRsd => "obm_rsd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Grouping used by the ObmRsd repeat rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Both exceedances in the same speed range.
    #[default]
    SpeedRange,
    /// Both exceedances in the same operating bin.
    Bin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningParams {
    /// NO concentration limit, ppm.
    pub national_limit_ppm: f64,
    pub window_days: i64,
    pub granularity: Granularity,
    /// Ranges with fewer screened vehicles are reported as insufficient data.
    pub min_range_vehicles: usize,
}

impl Default for ScreeningParams {
    fn default() -> Self {
        Self {
            national_limit_ppm: 1500.0,
            window_days: 183,
            granularity: Granularity::SpeedRange,
            min_range_vehicles: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exceedance {
    pub vehicle_id: String,
    pub timestamp: UnixSeconds,
    pub method: Method,
    /// Absent for national exceedances of passes in braking or idle.
    pub speed_range: Option<SpeedRange>,
    pub bin: Option<OperatingBin>,
    /// ppm for `National`, NOx/CO2 for `ObmRsd`.
    pub observed: f64,
    pub threshold: f64,
}

/// Only China V diesel passes enter screening.
pub fn is_eligible(p: &RsdPass) -> bool {
    p.fuel_type == FuelType::Diesel && p.emission_standard == EmissionStandard::ChinaV
}

fn classify_pass(
    p: &RsdPass,
    vp: &VspParams,
) -> Result<(OperatingBin, Option<SpeedRange>), BinningError> {
    let (bin, _) = classify_state(p.speed, p.accel, vp)?;
    Ok((bin, bin.speed_class().range()))
}

pub fn evaluate_pass_national(p: &RsdPass, limit_ppm: f64, vp: &VspParams) -> Option<Exceedance> {
    if p.no_ppm.partial_cmp(&limit_ppm) != Some(std::cmp::Ordering::Greater) {
        return None;
    }
    let (bin, speed_range) = classify_pass(p, vp).map_or((None, None), |(b, r)| (Some(b), r));
    Some(Exceedance {
        vehicle_id: p.vehicle_id.clone(),
        timestamp: p.timestamp,
        method: Method::National,
        speed_range,
        bin,
        observed: p.no_ppm,
        threshold: limit_ppm,
    })
}

pub fn evaluate_pass_obm_rsd(
    p: &RsdPass,
    t: &ThresholdTable,
    c: &FuelConstants,
    vp: &VspParams,
) -> Result<Option<Exceedance>, ScreeningError> {
    let (bin, speed_range) = classify_pass(p, vp)?;
    if matches!(bin.speed_class(), SpeedClass::Braking | SpeedClass::Idle) {
        return Err(ScreeningError::UnscreenableBin(bin));
    }
    let threshold = t.threshold(bin).ok_or(ScreeningError::NoThreshold(bin))?;
    let ratio = rsd_ratio_from_q3(p.q3_raw, c)?;
    Ok((ratio > threshold).then(|| Exceedance {
        vehicle_id: p.vehicle_id.clone(),
        timestamp: p.timestamp,
        method: Method::ObmRsd,
        speed_range,
        bin: Some(bin),
        observed: ratio,
        threshold,
    }))
}

/// Exceedances that can pair up under the repeat rule share a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum GroupKey {
    Any,
    Range(Option<SpeedRange>),
    Bin(Option<OperatingBin>),
}

fn group_key(e: &Exceedance, granularity: Granularity) -> GroupKey {
    match (e.method, granularity) {
        (Method::National, _) => GroupKey::Any,
        (Method::ObmRsd, Granularity::SpeedRange) => GroupKey::Range(e.speed_range),
        (Method::ObmRsd, Granularity::Bin) => GroupKey::Bin(e.bin),
    }
}

/// Exceedance history of one vehicle under one method.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleLedger {
    pub vehicle_id: String,
    pub method: Method,
    granularity: Granularity,
    events: BTreeMap<(UnixSeconds, GroupKey), Exceedance>,
}

impl VehicleLedger {
    pub fn new(vehicle_id: impl Into<String>, method: Method, granularity: Granularity) -> Self {
        Self {
            vehicle_id: vehicle_id.into(),
            method,
            granularity,
            events: BTreeMap::new(),
        }
    }

    /// Records an exceedance. A repeat at the same timestamp and group keeps
    /// the larger observation, so insertion order never matters.
    pub fn insert(&mut self, e: Exceedance) {
        let key = (e.timestamp, group_key(&e, self.granularity));
        match self.events.get(&key) {
            Some(prev) if prev.observed >= e.observed => {}
            _ => {
                self.events.insert(key, e);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn exceedances(&self) -> impl Iterator<Item = &Exceedance> {
        self.events.values()
    }

    /// Qualifying pairs: consecutive distinct timestamps of one group no more
    /// than the window apart (inclusive).
    fn qualifying_pairs(&self, window_days: i64) -> Vec<(&Exceedance, &Exceedance)> {
        let window = window_days * SECONDS_PER_DAY;
        let mut groups: BTreeMap<GroupKey, Vec<&Exceedance>> = BTreeMap::new();
        for ((_, key), e) in &self.events {
            groups.entry(*key).or_default().push(e);
        }
        let mut pairs = Vec::new();
        for events in groups.values() {
            for w in events.windows(2) {
                let dt = w[1].timestamp - w[0].timestamp;
                if dt > 0 && dt <= window {
                    pairs.push((w[0], w[1]));
                }
            }
        }
        pairs.sort_by_key(|(a, b)| (b.timestamp, a.timestamp));
        pairs
    }

    pub fn verdict(&self, window_days: i64) -> ScreeningVerdict {
        let pairs = self.qualifying_pairs(window_days);
        let flagged_ranges: BTreeSet<SpeedRange> = pairs
            .iter()
            .flat_map(|(a, b)| [a.speed_range, b.speed_range])
            .flatten()
            .collect();
        let (supporting, window) = match pairs.first() {
            Some((a, b)) => (
                vec![(*a).clone(), (*b).clone()],
                Some((a.timestamp, b.timestamp)),
            ),
            None => (Vec::new(), None),
        };
        let exceedances: Vec<Exceedance> = self.events.values().cloned().collect();
        ScreeningVerdict {
            vehicle_id: self.vehicle_id.clone(),
            method: self.method,
            flagged: window.is_some(),
            supporting,
            window,
            flagged_ranges,
            first_ts: exceedances.iter().map(|e| e.timestamp).min(),
            last_ts: exceedances.iter().map(|e| e.timestamp).max(),
            n_exceedances: exceedances.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningVerdict {
    pub vehicle_id: String,
    pub method: Method,
    pub flagged: bool,
    /// The earliest qualifying pair when flagged.
    pub supporting: Vec<Exceedance>,
    pub window: Option<(UnixSeconds, UnixSeconds)>,
    /// Speed ranges of the exceedances in any qualifying pair.
    pub flagged_ranges: BTreeSet<SpeedRange>,
    pub n_exceedances: usize,
    pub first_ts: Option<UnixSeconds>,
    pub last_ts: Option<UnixSeconds>,
}

/// Adds `e` to the ledger and re-evaluates it.
pub fn update_vehicle_state(
    ledger: &mut VehicleLedger,
    e: Exceedance,
    window_days: i64,
) -> ScreeningVerdict {
    ledger.insert(e);
    ledger.verdict(window_days)
}

/// What happened to one pass under one method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Compliant,
    Exceedance,
    /// Braking or idle: plume too small.
    UnscreenableBin,
    /// No threshold exists for the pass's bin.
    NoThreshold,
    /// Speed, acceleration or concentrations unusable.
    InvalidPass,
    /// Not a China V diesel vehicle.
    Ineligible,
}

impl Disposition {
    pub fn as_str(self) -> &'static str {
        match self {
            Disposition::Compliant => "compliant",
            Disposition::Exceedance => "exceedance",
            Disposition::UnscreenableBin => "unscreenable_bin",
            Disposition::NoThreshold => "no_threshold",
            Disposition::InvalidPass => "invalid_pass",
            Disposition::Ineligible => "ineligible",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassDisposition {
    pub vehicle_id: String,
    pub timestamp: UnixSeconds,
    pub site_id: String,
    pub method: Method,
    pub disposition: Disposition,
    pub bin: Option<OperatingBin>,
    pub speed_range: Option<SpeedRange>,
    pub observed: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreeningOutcome {
    /// Sorted by vehicle, timestamp, site and method.
    pub dispositions: Vec<PassDisposition>,
    /// One per (method, vehicle with at least one eligible pass), sorted.
    pub verdicts: Vec<ScreeningVerdict>,
}

impl ScreeningOutcome {
    pub fn verdicts_for(&self, method: Method) -> impl Iterator<Item = &ScreeningVerdict> {
        self.verdicts.iter().filter(move |v| v.method == method)
    }

    pub fn flagged(&self, method: Method) -> BTreeSet<&str> {
        self.verdicts_for(method)
            .filter(|v| v.flagged)
            .map(|v| v.vehicle_id.as_str())
            .collect()
    }
}

fn disposition(
    p: &RsdPass,
    method: Method,
    d: Disposition,
    e: Option<&Exceedance>,
) -> PassDisposition {
    PassDisposition {
        vehicle_id: p.vehicle_id.clone(),
        timestamp: p.timestamp,
        site_id: p.site_id.clone(),
        method,
        disposition: d,
        bin: e.and_then(|e| e.bin),
        speed_range: e.and_then(|e| e.speed_range),
        observed: e.map(|e| e.observed),
        threshold: e.map(|e| e.threshold),
    }
}

/// Screens every pass under both methods. The result does not depend on pass order.
pub fn screen_passes(
    passes: &[RsdPass],
    thresholds: &ThresholdTable,
    c: &FuelConstants,
    vp: &VspParams,
    params: &ScreeningParams,
) -> ScreeningOutcome {
    let mut ledgers: BTreeMap<(Method, String), VehicleLedger> = BTreeMap::new();
    let mut dispositions = Vec::with_capacity(passes.len() * 2);

    for p in passes {
        if !is_eligible(p) {
            for m in Method::ALL {
                dispositions.push(disposition(p, m, Disposition::Ineligible, None));
            }
            continue;
        }
        for m in Method::ALL {
            ledgers
                .entry((m, p.vehicle_id.clone()))
                .or_insert_with(|| VehicleLedger::new(p.vehicle_id.clone(), m, params.granularity));
        }

        let classified = classify_pass(p, vp).ok();
        let national = evaluate_pass_national(p, params.national_limit_ppm, vp);
        let mut row = disposition(
            p,
            Method::National,
            if national.is_some() {
                Disposition::Exceedance
            } else {
                Disposition::Compliant
            },
            national.as_ref(),
        );
        if national.is_none() {
            row.bin = classified.map(|(b, _)| b);
            row.speed_range = classified.and_then(|(_, r)| r);
            row.observed = Some(p.no_ppm);
            row.threshold = Some(params.national_limit_ppm);
        }
        dispositions.push(row);
        if let Some(e) = national {
            ledgers
                .get_mut(&(Method::National, p.vehicle_id.clone()))
                .unwrap()
                .insert(e);
        }

        let mut row = match evaluate_pass_obm_rsd(p, thresholds, c, vp) {
            Ok(Some(e)) => {
                let row = disposition(p, Method::ObmRsd, Disposition::Exceedance, Some(&e));
                ledgers
                    .get_mut(&(Method::ObmRsd, p.vehicle_id.clone()))
                    .unwrap()
                    .insert(e);
                row
            }
            Ok(None) => {
                let mut row = disposition(p, Method::ObmRsd, Disposition::Compliant, None);
                row.observed = rsd_ratio_from_q3(p.q3_raw, c).ok();
                row.threshold = classified.and_then(|(b, _)| thresholds.threshold(b));
                row
            }
            Err(ScreeningError::UnscreenableBin(_)) => {
                disposition(p, Method::ObmRsd, Disposition::UnscreenableBin, None)
            }
            Err(ScreeningError::NoThreshold(_)) => {
                disposition(p, Method::ObmRsd, Disposition::NoThreshold, None)
            }
            Err(_) => disposition(p, Method::ObmRsd, Disposition::InvalidPass, None),
        };
        if row.bin.is_none() {
            row.bin = classified.map(|(b, _)| b);
            row.speed_range = classified.and_then(|(_, r)| r);
        }
        dispositions.push(row);
    }

    dispositions.sort_by(|a, b| {
        (
            &a.vehicle_id,
            a.timestamp,
            &a.site_id,
            a.method,
            a.disposition,
        )
            .cmp(&(
                &b.vehicle_id,
                b.timestamp,
                &b.site_id,
                b.method,
                b.disposition,
            ))
            .then(
                a.observed
                    .unwrap_or(0.0)
                    .total_cmp(&b.observed.unwrap_or(0.0)),
            )
    });
    let verdicts = ledgers
        .values()
        .map(|l| l.verdict(params.window_days))
        .collect();
    ScreeningOutcome {
        dispositions,
        verdicts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeReport {
    pub range: SpeedRange,
    /// Vehicles with at least one screenable pass in the range.
    pub vehicles_seen: usize,
    pub flagged: usize,
    /// `None` when fewer than the configured minimum of vehicles were seen.
    pub flagged_pct: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetReport {
    pub method: Method,
    pub vehicles_seen: usize,
    pub flagged: usize,
    pub flagged_pct: Option<f64>,
    pub ranges: Vec<RangeReport>,
}

pub fn fleet_screening_report(
    outcome: &ScreeningOutcome,
    method: Method,
    min_range_vehicles: usize,
) -> FleetReport {
    let verdicts: Vec<&ScreeningVerdict> = outcome.verdicts_for(method).collect();
    let flagged = verdicts.iter().filter(|v| v.flagged).count();
    let pct = |k: usize, n: usize| (n > 0).then(|| 100.0 * k as f64 / n as f64);

    let mut seen_in: BTreeMap<SpeedRange, BTreeSet<&str>> = BTreeMap::new();
    for d in &outcome.dispositions {
        if d.method == method
            && matches!(
                d.disposition,
                Disposition::Compliant | Disposition::Exceedance
            )
        {
            if let Some(r) = d.speed_range {
                seen_in.entry(r).or_default().insert(&d.vehicle_id);
            }
        }
    }
    let ranges = if verdicts.is_empty() {
        Vec::new()
    } else {
        SpeedRange::ALL
            .into_iter()
            .map(|range| {
                let seen = seen_in.get(&range).map_or(0, BTreeSet::len);
                let flagged = verdicts
                    .iter()
                    .filter(|v| v.flagged_ranges.contains(&range))
                    .count();
                let ok = seen >= min_range_vehicles.max(1);
                RangeReport {
                    range,
                    vehicles_seen: seen,
                    flagged,
                    flagged_pct: if ok { pct(flagged, seen) } else { None },
                    status: if ok { "ok" } else { "insufficient data" }.to_string(),
                }
            })
            .collect()
    };
    FleetReport {
        method,
        vehicles_seen: verdicts.len(),
        flagged,
        flagged_pct: pct(flagged, verdicts.len()),
        ranges,
    }
}

#[derive(Serialize)]
struct VerdictRow<'a> {
    vehicle_id: &'a str,
    method: Method,
    flagged: bool,
    n_exceedances: usize,
    first_ts: Option<UnixSeconds>,
    last_ts: Option<UnixSeconds>,
    speed_range: String,
    window_start: Option<UnixSeconds>,
    window_end: Option<UnixSeconds>,
}

/// Verdict CSV; `speed_range` lists the flagged ranges joined by `;`.
pub fn write_verdicts<W: Write>(w: W, verdicts: &[ScreeningVerdict]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for v in verdicts {
        out.serialize(VerdictRow {
            vehicle_id: &v.vehicle_id,
            method: v.method,
            flagged: v.flagged,
            n_exceedances: v.n_exceedances,
            first_ts: v.first_ts,
            last_ts: v.last_ts,
            speed_range: v
                .flagged_ranges
                .iter()
                .map(|r| r.as_str())
                .collect::<Vec<_>>()
                .join(";"),
            window_start: v.window.map(|w| w.0),
            window_end: v.window.map(|w| w.1),
        })?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct VerdictRecord {
    vehicle_id: String,
    method: Method,
    flagged: bool,
}

/// Reads back the flagged vehicle ids per method from a verdict CSV.
pub fn read_flagged<R: std::io::Read>(
    r: R,
) -> Result<BTreeMap<Method, BTreeSet<String>>, csv::Error> {
    let mut out: BTreeMap<Method, BTreeSet<String>> = BTreeMap::new();
    for rec in csv::Reader::from_reader(r).deserialize::<VerdictRecord>() {
        let rec = rec?;
        let set = out.entry(rec.method).or_default();
        if rec.flagged {
            set.insert(rec.vehicle_id);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct DispositionRow<'a> {
    vehicle_id: &'a str,
    timestamp: UnixSeconds,
    site_id: &'a str,
    method: Method,
    disposition: &'static str,
    bin: Option<String>,
    speed_range: Option<&'static str>,
    observed: Option<f64>,
    threshold: Option<f64>,
}

pub fn write_dispositions<W: Write>(w: W, rows: &[PassDisposition]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for d in rows {
        out.serialize(DispositionRow {
            vehicle_id: &d.vehicle_id,
            timestamp: d.timestamp,
            site_id: &d.site_id,
            method: d.method,
            disposition: d.disposition.as_str(),
            bin: d.bin.map(|b| b.to_string()),
            speed_range: d.speed_range.map(SpeedRange::as_str),
            observed: d.observed,
            threshold: d.threshold,
        })?;
    }
    out.flush()?;
    Ok(())
}
