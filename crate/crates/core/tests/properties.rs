use std::collections::BTreeSet;

use proptest::prelude::*;

use noxwatch::binning::SpeedRange;
use noxwatch::binning::{classify, OperatingBin, VspParams};
use noxwatch::factors::{
    fuel_specific_ef, per_pass_mean_ef, ClassifiedPass, CohortSums, EfConstants,
};
use noxwatch::ingest::{
    estimate_acceleration, filter_trips, frozen_mask, ObmRecord, Trip, TripCriteria, FROZEN_FIELDS,
};
use noxwatch::profiling::{derive_thresholds, MeanWeighting, ProfileAccumulator, ThresholdParams};
use noxwatch::reduction_map::{DayWindow, FactorLookup, GridSpec, Period, ReductionGrid};
use noxwatch::screening::{Exceedance, Granularity, Method, VehicleLedger};

fn record(ts: i64, speed: f64) -> ObmRecord {
    ObmRecord {
        vehicle_id: "v".into(),
        timestamp: ts,
        speed,
        nox_out: 300.0,
        q_maf: 600.0,
        q_fr: 20.0,
        lat: 30.6,
        lon: 104.1,
        scr_temp: None,
        tank_level: None,
        valid: true,
    }
}

/// Row i is frozen iff, in some field, the maximal run of equal values around i is long enough.
fn frozen_brute(records: &[ObmRecord], run_len: usize) -> Vec<bool> {
    (0..records.len())
        .map(|i| {
            run_len > 0
                && FROZEN_FIELDS.iter().any(|f| {
                    let v = f.value(&records[i]);
                    let mut lo = i;
                    while lo > 0 && f.value(&records[lo - 1]) == v {
                        lo -= 1;
                    }
                    let mut hi = i;
                    while hi + 1 < records.len() && f.value(&records[hi + 1]) == v {
                        hi += 1;
                    }
                    hi - lo + 1 >= run_len
                })
        })
        .collect()
}

const BIN_TABLE: &[(f64, f64, f64, f64, u8)] = &[
    (1.6, 30.0, f64::NEG_INFINITY, -4.0, 11),
    (1.6, 30.0, -4.0, -2.0, 12),
    (1.6, 30.0, -2.0, 0.0, 13),
    (1.6, 30.0, 0.0, 2.0, 14),
    (1.6, 30.0, 2.0, 4.0, 15),
    (1.6, 30.0, 4.0, f64::INFINITY, 16),
    (30.0, 60.0, f64::NEG_INFINITY, -4.0, 21),
    (30.0, 60.0, -4.0, -2.0, 22),
    (30.0, 60.0, -2.0, 0.0, 23),
    (30.0, 60.0, 0.0, 2.0, 24),
    (30.0, 60.0, 2.0, 4.0, 25),
    (30.0, 60.0, 4.0, 6.0, 26),
    (30.0, 60.0, 6.0, 8.0, 27),
    (30.0, 60.0, 8.0, f64::INFINITY, 28),
    (60.0, f64::INFINITY, f64::NEG_INFINITY, 0.0, 33),
    (60.0, f64::INFINITY, 0.0, 2.0, 34),
    (60.0, f64::INFINITY, 2.0, 4.0, 35),
    (60.0, f64::INFINITY, 4.0, 6.0, 36),
    (60.0, f64::INFINITY, 6.0, 8.0, 37),
    (60.0, f64::INFINITY, 8.0, f64::INFINITY, 38),
];

fn bin_oracle(speed: f64, accel: f64, vsp: f64) -> u8 {
    if accel < -0.89 {
        return 0;
    }
    if speed < 1.6 {
        return 1;
    }
    let hits: Vec<u8> = BIN_TABLE
        .iter()
        .filter(|(s0, s1, v0, v1, _)| *s0 <= speed && speed < *s1 && *v0 <= vsp && vsp < *v1)
        .map(|r| r.4)
        .collect();
    assert_eq!(
        hits.len(),
        1,
        "table rows overlap or leave a hole at ({speed}, {vsp})"
    );
    hits[0]
}

fn exceedance(ts: i64, method: Method, range: Option<SpeedRange>, observed: f64) -> Exceedance {
    Exceedance {
        vehicle_id: "v".into(),
        timestamp: ts,
        method,
        speed_range: range,
        bin: None,
        observed,
        threshold: 1.0,
    }
}

fn range_of(i: u8) -> Option<SpeedRange> {
    match i % 4 {
        0 => Some(SpeedRange::Low),
        1 => Some(SpeedRange::Medium),
        2 => Some(SpeedRange::High),
        _ => None,
    }
}

fn method_of(b: bool) -> Method {
    if b {
        Method::ObmRsd
    } else {
        Method::National
    }
}

const DAY: i64 = 86_400;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn frozen_runs_match_brute_force(
        values in prop::collection::vec((0u8..3, 0u8..3, 0u8..3), 0..60),
        run_len in 1usize..12,
    ) {
        let records: Vec<ObmRecord> = values
            .iter()
            .enumerate()
            .map(|(i, (a, b, c))| ObmRecord {
                nox_out: f64::from(*a),
                q_maf: f64::from(*b),
                q_fr: f64::from(*c),
                ..record(i as i64 * 10, 20.0)
            })
            .collect();
        prop_assert_eq!(frozen_mask(&records, run_len), frozen_brute(&records, run_len));
    }

    #[test]
    fn bins_match_table(speed in 0.0f64..150.0, accel in -3.0f64..3.0, vsp in -30.0f64..40.0) {
        let bin = classify(speed, accel, vsp);
        prop_assert_eq!(bin.id(), bin_oracle(speed, accel, vsp));
    }

    #[test]
    fn loosening_criteria_never_rejects_more(
        trips in prop::collection::vec((0i64..4000, 0.0f64..1.0, 0.0f64..1.0), 1..30),
        base in (0i64..3600, 0.0f64..1.0, 0.0f64..1.0),
        slack in (0i64..1800, 0.0f64..0.5, 0.0f64..0.5),
    ) {
        let trips: Vec<Trip> = trips
            .iter()
            .enumerate()
            .map(|(i, (dur, gap, invalid))| Trip {
                vehicle_id: format!("v{i}"),
                records: Vec::new(),
                start: 0,
                end: *dur,
                gap_fraction: *gap,
                invalid_fraction: *invalid,
            })
            .collect();
        let strict = TripCriteria {
            min_duration_s: base.0 + slack.0,
            max_gap_fraction: base.1,
            max_invalid_fraction: base.2,
            frozen_run_len: 10,
        };
        let loose = TripCriteria {
            min_duration_s: base.0,
            max_gap_fraction: base.1 + slack.1,
            max_invalid_fraction: base.2 + slack.2,
            frozen_run_len: 10,
        };
        let ids = |c: &TripCriteria| -> BTreeSet<String> {
            filter_trips(trips.clone(), c).0.into_iter().map(|t| t.vehicle_id).collect()
        };
        prop_assert!(ids(&strict).is_subset(&ids(&loose)));
    }

    #[test]
    fn constant_acceleration_is_recovered(
        v0 in 0.0f64..20.0,
        a in -0.8f64..0.8,
        steps in prop::collection::vec(1i64..=12, 2..40),
    ) {
        let mut t = 0i64;
        let mut times = vec![0i64];
        for dt in &steps {
            t += dt;
            times.push(t);
        }
        let records: Vec<ObmRecord> = times
            .iter()
            .map(|&ts| record(ts, (v0 + a * ts as f64) * 3.6))
            .collect();
        let trip = Trip::from_records("v", records, 12);
        let est = estimate_acceleration(&trip).unwrap();
        for e in est {
            prop_assert!((e.accel - a).abs() < 1e-9, "{} vs {}", e.accel, a);
            prop_assert!(!e.low_confidence);
        }
    }

    #[test]
    fn thresholds_scale_with_ratios(
        states in prop::collection::vec((0usize..22, 0.001f64..0.02), 50..400),
        k in 0.01f64..100.0,
        probes in prop::collection::vec((0usize..22, 0.0f64..0.05), 1..50),
        min_samples in 1usize..30,
    ) {
        let build = |scale: f64| {
            let mut acc = ProfileAccumulator::new();
            for (i, (b, r)) in states.iter().enumerate() {
                let bin = OperatingBin::ALL[*b];
                acc.add_state(&format!("v{}", i % 7), bin, Some(r * scale), 10.0, 20.0, 40.0);
            }
            acc.finish(MeanWeighting::Sample).unwrap()
        };
        let params = ThresholdParams { multiplier: 2.0, min_samples };
        let (Ok(t1), Ok(tk)) = (derive_thresholds(&build(1.0), &params), derive_thresholds(&build(k), &params)) else {
            return Ok(());
        };
        for bin in OperatingBin::ALL {
            match (t1.threshold(bin), tk.threshold(bin)) {
                (Some(a), Some(b)) => prop_assert!((b - k * a).abs() <= 1e-12 * (k * a).abs().max(1e-300)),
                (None, None) => {}
                other => prop_assert!(false, "threshold presence differs: {other:?}"),
            }
        }
        for (b, r) in &probes {
            let bin = OperatingBin::ALL[*b];
            if let (Some(a), Some(c)) = (t1.threshold(bin), tk.threshold(bin)) {
                let flag1 = *r > a;
                let flagk = r * k > c;
                // Exact ties can differ in the last ulp after scaling.
                if ((r - a) / a).abs() > 1e-9 {
                    prop_assert_eq!(flag1, flagk);
                }
            }
        }
    }

    #[test]
    fn profile_merge_matches_single_pass(
        states in prop::collection::vec((0usize..22, prop::option::of(0.001f64..0.02), 0.0f64..12.0), 1..200),
        cut1 in 0usize..200,
        cut2 in 0usize..200,
    ) {
        let (c1, c2) = {
            let a = cut1.min(states.len());
            let b = cut2.min(states.len());
            (a.min(b), a.max(b))
        };
        let add = |acc: &mut ProfileAccumulator, s: &[(usize, Option<f64>, f64)]| {
            for (i, (b, r, dwell)) in s.iter().enumerate() {
                acc.add_state(&format!("v{}", i % 5), OperatingBin::ALL[*b], *r, *dwell, 20.0, 40.0);
            }
        };
        let mut whole = ProfileAccumulator::new();
        add(&mut whole, &states);
        let parts: Vec<ProfileAccumulator> = [&states[..c1], &states[c1..c2], &states[c2..]]
            .iter()
            .map(|s| {
                let mut acc = ProfileAccumulator::new();
                add(&mut acc, s);
                acc
            })
            .collect();
        // (a + b) + c and a + (b + c)
        let mut left = parts[0].clone();
        left.merge(parts[1].clone());
        left.merge(parts[2].clone());
        let mut right_tail = parts[1].clone();
        right_tail.merge(parts[2].clone());
        let mut right = parts[0].clone();
        right.merge(right_tail);

        let (w, l, r) = (whole.finish(MeanWeighting::Sample), left.finish(MeanWeighting::Sample), right.finish(MeanWeighting::Sample));
        match (w, l, r) {
            (Ok(w), Ok(l), Ok(r)) => {
                prop_assert_eq!(w.profiles.len(), l.profiles.len());
                prop_assert_eq!(l.profiles.len(), r.profiles.len());
                for ((a, b), c) in w.profiles.iter().zip(&l.profiles).zip(&r.profiles) {
                    prop_assert_eq!(a.n, b.n);
                    prop_assert_eq!(b.n, c.n);
                    prop_assert_eq!(a.median_ratio, b.median_ratio);
                    prop_assert_eq!(b.median_ratio, c.median_ratio);
                    for (x, y) in [(a.mean_ratio, b.mean_ratio), (b.mean_ratio, c.mean_ratio)] {
                        match (x, y) {
                            (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-12 * x.abs()),
                            (x, y) => prop_assert_eq!(x, y),
                        }
                    }
                    prop_assert!((a.dwell_s - b.dwell_s).abs() <= 1e-9 && (b.dwell_s - c.dwell_s).abs() <= 1e-9);
                }
            }
            (Err(_), Err(_), Err(_)) => {}
            _ => prop_assert!(false, "merge changed emptiness"),
        }
    }

    #[test]
    fn screening_is_order_independent(
        events in prop::collection::vec((0i64..400, 0u8..4, 1.0f64..5.0), 0..8),
        obm in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let method = method_of(obm);
        let mut shuffled = events.clone();
        // deterministic permutation from the seed
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let verdict = |evs: &[(i64, u8, f64)]| {
            let mut l = VehicleLedger::new("v", method, Granularity::SpeedRange);
            for (d, r, o) in evs {
                l.insert(exceedance(d * DAY, method, range_of(*r), *o));
            }
            l.verdict(183)
        };
        prop_assert_eq!(verdict(&events), verdict(&shuffled));
    }

    #[test]
    fn more_exceedances_never_unflag(
        events in prop::collection::vec((0i64..400, 0u8..4), 0..8),
        extra in (0i64..400, 0u8..4),
        obm in any::<bool>(),
    ) {
        let method = method_of(obm);
        let mut l = VehicleLedger::new("v", method, Granularity::SpeedRange);
        for (d, r) in &events {
            l.insert(exceedance(d * DAY, method, range_of(*r), 2.0));
        }
        let before = l.verdict(183);
        l.insert(exceedance(extra.0 * DAY, method, range_of(extra.1), 2.0));
        let after = l.verdict(183);
        prop_assert!(!before.flagged || after.flagged);
        prop_assert!(before.flagged_ranges.is_subset(&after.flagged_ranges));
        // a wider window never unflags either
        prop_assert!(!after.flagged || l.verdict(365).flagged);
    }

    #[test]
    fn grid_cells_conserve_totals(
        trips in prop::collection::vec(
            (any::<bool>(), 0i64..(3 * DAY), prop::collection::vec((0.0f64..90.0, -0.003f64..0.003, -0.003f64..0.003, 1i64..=10), 3..30)),
            1..8,
        ),
        ef in (0.5f64..10.0, 0.0f64..20.0),
    ) {
        let spec = GridSpec::default();
        let mut lookup = FactorLookup::default();
        for r in SpeedRange::ALL {
            lookup.set(r, ef.0, ef.1);
        }
        let mut grid = ReductionGrid::new(spec, DayWindow::default());
        for (k, (flagged, start, steps)) in trips.iter().enumerate() {
            let (mut lat, mut lon, mut ts) = (30.6, 104.1, *start);
            let records: Vec<ObmRecord> = steps
                .iter()
                .map(|(speed, dlat, dlon, dt)| {
                    lat += dlat;
                    lon += dlon;
                    ts += dt;
                    ObmRecord { vehicle_id: format!("v{k}"), lat, lon, ..record(ts, *speed) }
                })
                .collect();
            let trip = Trip::from_records(format!("v{k}"), records, 12);
            let accel = estimate_acceleration(&trip).unwrap();
            grid.add_trip(&trip, &accel, *flagged, &lookup, &VspParams::default());
        }
        let total = grid.totals();
        let cells = grid.cells();
        let sum = |f: fn(&noxwatch::reduction_map::CellTotals) -> f64| cells.iter().map(|c| f(&c.totals)).sum::<f64>();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-12);
        prop_assert!(close(sum(|t| t.reduction_g), total.reduction_g));
        prop_assert!(close(sum(|t| t.baseline_g), total.baseline_g));
        prop_assert!(close(sum(|t| t.distance_all_km), total.distance_all_km));
        let (d, n) = (grid.period_totals(Period::Day), grid.period_totals(Period::Night));
        prop_assert_eq!(d.reduction_g + n.reduction_g, total.reduction_g);
        prop_assert_eq!(d.distance_all_km + n.distance_all_km, total.distance_all_km);
        if ef.1 <= ef.0 {
            prop_assert_eq!(total.reduction_g, 0.0);
        }
    }

    #[test]
    fn mean_of_ratios_equals_per_pass_mean_at_fixed_q1_q2(
        q3s in prop::collection::vec(0.0f64..0.02, 1..50),
        q1 in 0.0f64..0.05,
        q2 in 0.0f64..0.005,
    ) {
        let passes: Vec<ClassifiedPass<'_>> = q3s
            .iter()
            .map(|&q3| ClassifiedPass { vehicle_id: "v", range: SpeedRange::Medium, q1, q2, q3 })
            .collect();
        let mut sums = CohortSums::default();
        for p in &passes {
            sums.add(p.vehicle_id, p.q1, p.q2, p.q3);
        }
        let (m1, m2, m3) = sums.means().unwrap();
        let pooled = fuel_specific_ef(m1, m2, m3);
        let per_pass = per_pass_mean_ef(&passes, &EfConstants::default()).unwrap();
        prop_assert!((pooled - per_pass).abs() <= 1e-9 * pooled.abs().max(1e-12));
    }
}
