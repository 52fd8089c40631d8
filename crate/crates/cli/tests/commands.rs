use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;
use sha2::{Digest, Sha256};

use noxwatch::profiling::{read_profiles, read_thresholds};
use noxwatch::synthfleet::read_manifest;

struct Run {
    code: i32,
    out: Value,
}

fn noxwatch(dir: &Path, args: &[&str]) -> Run {
    let output = Command::new(env!("CARGO_BIN_EXE_noxwatch"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&output.stdout);
    Run {
        code: output.status.code().unwrap_or(-1),
        out: serde_json::from_str(&stdout).unwrap_or(Value::Null),
    }
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let r = noxwatch(dir, args);
    assert_eq!(r.code, 0, "{args:?}: {}", r.out);
    r.out["summary"].clone()
}

/// A small generated dataset in `dir/data` with its config.
fn dataset(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let mut args = vec![
        "simulate",
        "--out",
        "data",
        "--vehicles",
        "60",
        "--seed",
        "11",
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
    dir.join("data")
}

fn hash_dir(dir: &Path) -> String {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn empty_input_directory_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir_all(tmp.path().join("obm")).unwrap();
    fs::create_dir_all(tmp.path().join("rsd")).unwrap();
    fs::write(
        tmp.path().join("noxwatch.toml"),
        "schema_version = 1\n[paths]\nobm_dir = \"obm\"\nrsd_dir = \"rsd\"\noutput_dir = \"out\"\n",
    )
    .unwrap();
    let r = noxwatch(tmp.path(), &["ingest"]);
    assert_eq!(r.code, 2);
    assert_eq!(r.out["status"], "error");
    assert!(r.out["message"].as_str().unwrap().contains("no OBM files"));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(noxwatch(tmp.path(), &["frobnicate"]).code, 1);
    assert_eq!(
        noxwatch(tmp.path(), &["--config", "missing.toml", "ingest"]).code,
        1
    );
    fs::write(tmp.path().join("bad.toml"), "schema_version = 9\n").unwrap();
    let r = noxwatch(tmp.path(), &["--config", "bad.toml", "ingest"]);
    assert_eq!(r.code, 1);
    assert!(r.out["message"]
        .as_str()
        .unwrap()
        .contains("schema_version"));
    fs::write(
        tmp.path().join("range.toml"),
        "schema_version = 1\n[thresholds]\nmultiplier = 0.0\n",
    )
    .unwrap();
    assert_eq!(
        noxwatch(tmp.path(), &["--config", "range.toml", "profile"]).code,
        1
    );
}

#[test]
fn missing_stage_inputs_name_the_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), &[]);
    let r = noxwatch(&data, &["profile"]);
    assert_eq!(r.code, 2);
    assert!(r.out["message"]
        .as_str()
        .unwrap()
        .contains("run `noxwatch ingest` first"));
    ok(&data, &["ingest"]);
    let r = noxwatch(&data, &["screen"]);
    assert_eq!(r.code, 2);
    assert!(r.out["message"]
        .as_str()
        .unwrap()
        .contains("run `noxwatch profile` first"));
}

#[test]
fn simulated_data_round_trips_through_ingest() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = ok(
        tmp.path(),
        &[
            "simulate",
            "--out",
            "data",
            "--vehicles",
            "60",
            "--seed",
            "11",
        ],
    );
    assert_eq!(sim["n_high_emitters"], 4); // round(0.07 * 60)
    let data = tmp.path().join("data");
    let truth = read_manifest(&data.join("manifest.json")).unwrap();
    assert_eq!(truth.he_vehicle_ids.len(), 4);

    let q = ok(&data, &["ingest"]);
    assert_eq!(q["obm_rows_read"], truth.n_obm_rows);
    assert_eq!(q["obm_records"], truth.n_obm_rows);
    assert_eq!(q["obm_issues"], serde_json::json!({}));
    assert_eq!(q["rsd_issues"], serde_json::json!({}));
    assert_eq!(q["rsd_passes"], truth.n_rsd_passes);
    assert_eq!(q["trips_accepted"], truth.trips.len());
    assert_eq!(q["trips_rejected"], serde_json::json!({}));
    let issues = fs::read_to_string(data.join("out/ingest_issues.csv")).unwrap();
    assert_eq!(issues.lines().count(), 1, "header only");
}

#[test]
fn corrupted_rows_are_counted() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("spec.toml"), "corrupt_fraction = 0.02\n").unwrap();
    let data = dataset(tmp.path(), &["--spec", "spec.toml"]);
    let truth = read_manifest(&data.join("manifest.json")).unwrap();
    assert!(truth.corrupted_rows > 0);
    let q = ok(&data, &["ingest"]);
    assert_eq!(q["obm_issues"]["malformed_row"], truth.corrupted_rows);
    assert_eq!(q["obm_records"], truth.n_obm_rows - truth.corrupted_rows);
    let issues = fs::read_to_string(data.join("out/ingest_issues.csv")).unwrap();
    assert_eq!(issues.lines().count(), truth.corrupted_rows + 1);
}

#[test]
fn unit_multiplier_thresholds_equal_means() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), &[]);
    ok(&data, &["ingest"]);
    let p = ok(&data, &["profile", "--multiplier", "1.0"]);
    assert_eq!(p["multiplier"], 1.0);
    let set = read_profiles(&fs::read_to_string(data.join("out/profiles.csv")).unwrap()).unwrap();
    let table =
        read_thresholds(&fs::read_to_string(data.join("out/thresholds.csv")).unwrap()).unwrap();
    let mut own = 0;
    for b in &table.bins {
        if b.n >= table.min_samples {
            let mean = set.get(b.bin).unwrap().mean_ratio.unwrap();
            assert_eq!(b.threshold, Some(mean), "{}", b.bin);
            own += 1;
        }
    }
    assert!(own > 10);
}

fn flagged(summary: &Value, method: &str) -> BTreeSet<String> {
    summary["methods"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["method"] == method)
        .map(|m| {
            m["flagged_vehicles"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_str().unwrap().to_string())
                .collect()
        })
        .unwrap()
}

#[test]
fn screening_methods_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), &[]);
    ok(&data, &["ingest"]);
    ok(&data, &["profile"]);

    let both = ok(&data, &["screen", "--method", "both"]);
    let national = ok(&data, &["screen", "--method", "national"]);
    let obm = ok(&data, &["screen", "--method", "obm-rsd"]);
    assert_eq!(flagged(&both, "national"), flagged(&national, "national"));
    assert_eq!(flagged(&both, "obm_rsd"), flagged(&obm, "obm_rsd"));
    assert_eq!(national["methods"].as_array().unwrap().len(), 1);

    let truth = read_manifest(&data.join("manifest.json")).unwrap();
    let he: BTreeSet<String> = truth.he_vehicle_ids.iter().cloned().collect();
    assert_eq!(flagged(&obm, "obm_rsd"), he);

    let lax = ok(
        &data,
        &["screen", "--method", "national", "--national-limit", "1e9"],
    );
    assert!(flagged(&lax, "national").is_empty());
    assert_eq!(lax["national_limit_ppm"], 1e9);
    let strict = ok(
        &data,
        &["screen", "--method", "national", "--national-limit", "1"],
    );
    assert!(flagged(&strict, "national").is_superset(&flagged(&national, "national")));
    assert_eq!(flagged(&strict, "national").len(), 60);
}

#[test]
fn map_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path(), &[]);
    ok(&data, &["ingest"]);
    ok(&data, &["profile"]);

    // nobody flagged: the grid carries distance but no reduction
    ok(
        &data,
        &["screen", "--method", "national", "--national-limit", "1e9"],
    );
    let m = ok(&data, &["map", "--method", "national"]);
    assert_eq!(m["n_flagged_vehicles"], 0);
    assert_eq!(m["totals"]["reduction_g"], 0.0);
    let geo: Value =
        serde_json::from_str(&fs::read_to_string(data.join("out/reduction_grid.geojson")).unwrap())
            .unwrap();
    assert!(geo["features"]
        .as_array()
        .unwrap()
        .iter()
        .all(|f| f["properties"]["reduction_g"] == 0.0));

    // map needs verdicts of the requested method
    let r = noxwatch(&data, &["map", "--method", "obm-rsd"]);
    assert_eq!(r.code, 2);

    ok(&data, &["screen"]);
    let m = ok(&data, &["map"]);
    assert_eq!(m["n_flagged_vehicles"], 4);
    let total = m["totals"]["reduction_g"].as_f64().unwrap();
    let periods: f64 = m["periods"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["totals"]["reduction_g"].as_f64().unwrap())
        .sum();
    assert!(total > 0.0);
    assert_eq!(periods, total);
    let txt = fs::read_to_string(data.join("out/reduction_summary.txt")).unwrap();
    assert!(txt.starts_with("method: obm_rsd"));

    let rep = ok(&data, &["report"]);
    assert!(rep["quality"].is_object() && rep["map"].is_object());
    assert!(data.join("out/report.json").is_file());
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let da = dataset(&a, &[]);
    let db = dataset(&b, &[]);
    assert_eq!(hash_dir(&da.join("obm")), hash_dir(&db.join("obm")));
    assert_eq!(hash_dir(&da.join("rsd")), hash_dir(&db.join("rsd")));
    for stage in ["ingest", "profile", "screen", "map", "report"] {
        ok(&da, &[stage]);
        ok(&db, &["--threads", "1", stage]);
    }
    let first = hash_dir(&da.join("out"));
    assert_eq!(first, hash_dir(&db.join("out")));
    for stage in ["ingest", "profile", "screen", "map", "report"] {
        ok(&da, &[stage]);
    }
    assert_eq!(first, hash_dir(&da.join("out")));
}
