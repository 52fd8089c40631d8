use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ObmRecord, Trip, UnixSeconds};

/// Inclusive `[min, max]` envelope for one field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldRange {
    pub min: f64,
    pub max: f64,
}

impl FieldRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, v: f64) -> bool {
        v.is_finite() && v >= self.min && v <= self.max
    }
}

/// Plausibility envelopes for the fields needed to compute emission rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangeTable {
    pub speed: FieldRange,
    pub nox_out: FieldRange,
    pub q_fr: FieldRange,
    pub q_maf: FieldRange,
    pub lat: FieldRange,
    pub lon: FieldRange,
}

impl Default for RangeTable {
    fn default() -> Self {
        Self {
            speed: FieldRange::new(0.0, 120.0),
            nox_out: FieldRange::new(0.0, 5000.0),
            q_fr: FieldRange::new(0.0, 200.0),
            q_maf: FieldRange::new(0.0, 5000.0),
            lat: FieldRange::new(-90.0, 90.0),
            lon: FieldRange::new(-180.0, 180.0),
        }
    }
}

impl RangeTable {
    pub fn get(&self, field: ObmField) -> FieldRange {
        match field {
            ObmField::Speed => self.speed,
            ObmField::NoxOut => self.nox_out,
            ObmField::QFr => self.q_fr,
            ObmField::QMaf => self.q_maf,
            ObmField::Lat => self.lat,
            ObmField::Lon => self.lon,
        }
    }

    /// Every range must be finite-bounded and non-inverted.
    pub fn is_well_formed(&self) -> bool {
        ObmField::ALL.iter().all(|&f| {
            let r = self.get(f);
            !r.min.is_nan() && !r.max.is_nan() && r.min <= r.max
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ObmField {
    Speed,
    NoxOut,
    QFr,
    QMaf,
    Lat,
    Lon,
}

impl ObmField {
    pub const ALL: [ObmField; 6] = [
        ObmField::Speed,
        ObmField::NoxOut,
        ObmField::QFr,
        ObmField::QMaf,
        ObmField::Lat,
        ObmField::Lon,
    ];

    pub fn value(self, r: &ObmRecord) -> f64 {
        match self {
            ObmField::Speed => r.speed,
            ObmField::NoxOut => r.nox_out,
            ObmField::QFr => r.q_fr,
            ObmField::QMaf => r.q_maf,
            ObmField::Lat => r.lat,
            ObmField::Lon => r.lon,
        }
    }
}

impl fmt::Display for ObmField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ObmField::Speed => "speed",
            ObmField::NoxOut => "nox_out",
            ObmField::QFr => "q_fr",
            ObmField::QMaf => "q_maf",
            ObmField::Lat => "lat",
            ObmField::Lon => "lon",
        };
        f.write_str(s)
    }
}

/// Fields whose stuck values invalidate a record: the inputs of the NOx
/// emission-rate calculation. Speed is excluded since it legitimately sits
/// at zero while idling.
pub const FROZEN_FIELDS: [ObmField; 3] = [ObmField::NoxOut, ObmField::QMaf, ObmField::QFr];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Validity {
    pub valid: bool,
    pub violated: Vec<ObmField>,
}

/// Checks every range-tabled field. Non-finite values always violate.
pub fn validate_record(r: &ObmRecord, ranges: &RangeTable) -> Validity {
    let violated: Vec<ObmField> = ObmField::ALL
        .into_iter()
        .filter(|&f| !ranges.get(f).contains(f.value(r)))
        .collect();
    Validity {
        valid: violated.is_empty(),
        violated,
    }
}

/// Sets each record's flag from the range checks. Returns the number of
/// invalid records.
pub fn apply_ranges(records: &mut [ObmRecord], ranges: &RangeTable) -> usize {
    let mut invalid = 0;
    for r in records.iter_mut() {
        r.valid = validate_record(r, ranges).valid;
        if !r.valid {
            invalid += 1;
        }
    }
    invalid
}

/// Marks records inside a maximal run of `run_len` or more identical
/// consecutive values in any of the [`FROZEN_FIELDS`].
pub fn frozen_mask(records: &[ObmRecord], run_len: usize) -> Vec<bool> {
    let mut mask = vec![false; records.len()];
    if run_len == 0 {
        return mask;
    }
    for field in FROZEN_FIELDS {
        let mut start = 0;
        while start < records.len() {
            let value = field.value(&records[start]);
            let mut end = start + 1;
            while end < records.len() && field.value(&records[end]) == value {
                end += 1;
            }
            if end - start >= run_len {
                mask[start..end].iter_mut().for_each(|m| *m = true);
            }
            start = end;
        }
    }
    mask
}

/// Downgrades records in frozen runs. Returns how many were newly invalidated.
pub fn mark_frozen_runs(records: &mut [ObmRecord], run_len: usize) -> usize {
    let mask = frozen_mask(records, run_len);
    let mut downgraded = 0;
    for (r, frozen) in records.iter_mut().zip(mask) {
        if frozen && r.valid {
            r.valid = false;
            downgraded += 1;
        }
    }
    downgraded
}

/// Groups records by vehicle and sorts each stream by timestamp. Records that
/// repeat an already-seen (vehicle, timestamp) are returned separately.
pub fn group_by_vehicle(
    records: Vec<ObmRecord>,
) -> (BTreeMap<String, Vec<ObmRecord>>, Vec<ObmRecord>) {
    let mut by_vehicle: BTreeMap<String, Vec<ObmRecord>> = BTreeMap::new();
    for r in records {
        by_vehicle.entry(r.vehicle_id.clone()).or_default().push(r);
    }
    let mut duplicates = Vec::new();
    for stream in by_vehicle.values_mut() {
        stream.sort_by_key(|r| r.timestamp);
        let mut kept: Vec<ObmRecord> = Vec::with_capacity(stream.len());
        for r in stream.drain(..) {
            if kept.last().is_some_and(|k| k.timestamp == r.timestamp) {
                duplicates.push(r);
            } else {
                kept.push(r);
            }
        }
        *stream = kept;
    }
    (by_vehicle, duplicates)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentParams {
    /// A gap longer than this starts a new trip, seconds.
    pub idle_gap_s: i64,
    /// Intervals longer than this count as data gaps, seconds.
    pub gap_interval_s: i64,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            idle_gap_s: 1800,
            gap_interval_s: 12,
        }
    }
}

/// Splits one vehicle's time-ordered stream into trips.
pub fn segment_trips(
    vehicle_id: &str,
    records: Vec<ObmRecord>,
    params: &SegmentParams,
) -> Vec<Trip> {
    let mut trips = Vec::new();
    let mut current: Vec<ObmRecord> = Vec::new();
    let mut last: Option<UnixSeconds> = None;
    for r in records {
        if let Some(prev) = last {
            if r.timestamp - prev > params.idle_gap_s {
                trips.push(Trip::from_records(
                    vehicle_id,
                    std::mem::take(&mut current),
                    params.gap_interval_s,
                ));
            }
        }
        last = Some(r.timestamp);
        current.push(r);
    }
    if !current.is_empty() {
        trips.push(Trip::from_records(
            vehicle_id,
            current,
            params.gap_interval_s,
        ));
    }
    trips
}

/// Trip acceptance thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripCriteria {
    pub min_duration_s: i64,
    /// Accept when `gap_fraction <= max_gap_fraction`.
    pub max_gap_fraction: f64,
    /// Accept when `invalid_fraction < max_invalid_fraction`.
    pub max_invalid_fraction: f64,
    /// Consecutive identical values that count as a frozen sensor.
    pub frozen_run_len: usize,
}

impl Default for TripCriteria {
    fn default() -> Self {
        Self {
            min_duration_s: 1800,
            max_gap_fraction: 0.30,
            max_invalid_fraction: 0.30,
            frozen_run_len: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    TooShort,
    TooManyGaps,
    TooManyInvalid,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::TooShort => "duration",
            RejectReason::TooManyGaps => "gaps",
            RejectReason::TooManyInvalid => "invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedTrip {
    pub trip: Trip,
    pub reason: RejectReason,
}

impl TripCriteria {
    /// First failed criterion, if any, checked in order duration, gaps, invalid.
    pub fn check(&self, trip: &Trip) -> Option<RejectReason> {
        if trip.duration() < self.min_duration_s {
            Some(RejectReason::TooShort)
        } else if trip.gap_fraction > self.max_gap_fraction {
            Some(RejectReason::TooManyGaps)
        } else if trip.invalid_fraction >= self.max_invalid_fraction {
            Some(RejectReason::TooManyInvalid)
        } else {
            None
        }
    }
}

pub fn filter_trips(trips: Vec<Trip>, criteria: &TripCriteria) -> (Vec<Trip>, Vec<RejectedTrip>) {
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for trip in trips {
        match criteria.check(&trip) {
            None => accepted.push(trip),
            Some(reason) => {
                log::debug!(
                    "rejecting trip {} [{}, {}]: {}",
                    trip.vehicle_id,
                    trip.start,
                    trip.end,
                    reason.as_str()
                );
                rejected.push(RejectedTrip { trip, reason });
            }
        }
    }
    (accepted, rejected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: i64) -> ObmRecord {
        ObmRecord {
            vehicle_id: "V".into(),
            timestamp: t,
            speed: 45.0,
            nox_out: 500.0 + t as f64,
            q_maf: 300.0 + t as f64,
            q_fr: 20.0 + 0.001 * t as f64,
            lat: 30.6,
            lon: 104.0,
            scr_temp: None,
            tank_level: None,
            valid: true,
        }
    }

    fn stream(start: i64, count: usize, step: i64) -> Vec<ObmRecord> {
        (0..count).map(|i| rec(start + i as i64 * step)).collect()
    }

    #[test]
    fn validate_examples() {
        let ranges = RangeTable::default();
        let mut r = rec(0);
        r.nox_out = 500.0;
        r.q_maf = 300.0;
        r.q_fr = 20.0;
        assert!(validate_record(&r, &ranges).valid);

        let mut neg = r.clone();
        neg.nox_out = -5.0;
        let v = validate_record(&neg, &ranges);
        assert!(!v.valid);
        assert_eq!(v.violated, vec![ObmField::NoxOut]);

        let mut fuel = r.clone();
        fuel.q_fr = 500.0;
        assert_eq!(
            validate_record(&fuel, &ranges).violated,
            vec![ObmField::QFr]
        );

        let mut nan = r;
        nan.speed = f64::NAN;
        assert_eq!(
            validate_record(&nan, &ranges).violated,
            vec![ObmField::Speed]
        );
    }

    fn with_nox(values: &[f64]) -> Vec<ObmRecord> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut r = rec(i as i64 * 10);
                r.nox_out = v;
                r
            })
            .collect()
    }

    #[test]
    fn ten_identical_values_are_frozen() {
        let mut recs = with_nox(&[7.0; 10]);
        assert_eq!(mark_frozen_runs(&mut recs, 10), 10);
        assert!(recs.iter().all(|r| !r.valid));
    }

    #[test]
    fn nine_identical_values_are_not() {
        let mut recs = with_nox(&[7.0; 9]);
        assert_eq!(mark_frozen_runs(&mut recs, 10), 0);
    }

    #[test]
    fn two_runs_split_by_one_value() {
        let mut values = vec![1.0; 12];
        values.push(2.0);
        values.extend([3.0; 10]);
        let mask = frozen_mask(&with_nox(&values), 10);
        for (i, m) in mask.iter().enumerate() {
            // records 1-12 and 14-23 in 1-based numbering
            assert_eq!(*m, i != 12, "record {}", i + 1);
        }
    }

    #[test]
    fn segmentation_examples() {
        let p = SegmentParams::default();
        // 45 min at 10 s
        assert_eq!(segment_trips("V", stream(0, 271, 10), &p).len(), 1);

        // two 40-min blocks 2 h apart
        let mut two = stream(0, 241, 10);
        two.extend(stream(2400 + 7200, 241, 10));
        let trips = segment_trips("V", two, &p);
        assert_eq!(trips.len(), 2);
        assert_eq!(trips[0].records.len() + trips[1].records.len(), 482);

        // 60-min stream with a 20-min hole in the middle: 1200 s <= 1800 s, one trip
        let mut holed = stream(0, 121, 10);
        holed.extend(stream(1200 + 1200, 121, 10));
        assert_eq!(segment_trips("V", holed.clone(), &p).len(), 1);
        // with a 10-min idle gap the hole splits the stream
        let short = SegmentParams {
            idle_gap_s: 600,
            ..p
        };
        assert_eq!(segment_trips("V", holed, &short).len(), 2);
    }

    #[test]
    fn gap_fraction_counts_intervals() {
        // 4 records, intervals 10, 20, 10 -> one of three intervals is a gap
        let recs = vec![rec(0), rec(10), rec(30), rec(40)];
        let trip = Trip::from_records("V", recs, 12);
        assert!((trip.gap_fraction - 1.0 / 3.0).abs() < 1e-15);
    }

    fn trip_with(duration: i64, gap_every: Option<usize>, invalid: usize) -> Trip {
        let mut t = 0;
        let mut recs = Vec::new();
        let mut i = 0;
        while t <= duration {
            let mut r = rec(t);
            r.valid = i >= invalid;
            recs.push(r);
            i += 1;
            t += match gap_every {
                Some(k) if i % k == 0 => 20,
                _ => 10,
            };
        }
        Trip::from_records("V", recs, 12)
    }

    #[test]
    fn filter_examples() {
        let c = TripCriteria::default();
        assert_eq!(
            c.check(&trip_with(25 * 60, None, 0)),
            Some(RejectReason::TooShort)
        );
        let gappy = trip_with(45 * 60, Some(2), 0);
        assert!(gappy.gap_fraction > 0.3);
        assert_eq!(c.check(&gappy), Some(RejectReason::TooManyGaps));
        assert_eq!(c.check(&trip_with(45 * 60, None, 0)), None);
        let bad = trip_with(45 * 60, None, 200);
        assert_eq!(c.check(&bad), Some(RejectReason::TooManyInvalid));

        let (ok, rejected) = filter_trips(
            vec![trip_with(45 * 60, None, 0), trip_with(60, None, 0)],
            &c,
        );
        assert_eq!(ok.len(), 1);
        assert_eq!(rejected[0].reason, RejectReason::TooShort);
    }

    #[test]
    fn boundary_fractions() {
        let c = TripCriteria::default();
        let mut t = trip_with(45 * 60, None, 0);
        t.gap_fraction = 0.30;
        assert_eq!(c.check(&t), None);
        t.invalid_fraction = 0.30;
        assert_eq!(c.check(&t), Some(RejectReason::TooManyInvalid));
        let exactly = trip_with(1800, None, 0);
        assert_eq!(exactly.duration(), 1800);
        assert_eq!(c.check(&exactly), None);
    }

    #[test]
    fn grouping_sorts_and_drops_duplicates() {
        let mut a = rec(20);
        a.vehicle_id = "A".into();
        let mut b = rec(10);
        b.vehicle_id = "A".into();
        let dup = b.clone();
        let mut c = rec(5);
        c.vehicle_id = "B".into();
        let (groups, dups) = group_by_vehicle(vec![a, b, c, dup]);
        assert_eq!(
            groups["A"].iter().map(|r| r.timestamp).collect::<Vec<_>>(),
            vec![10, 20]
        );
        assert_eq!(groups["B"].len(), 1);
        assert_eq!(dups.len(), 1);
    }
}
