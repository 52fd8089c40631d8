use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use noxwatch::factors::{
    classify_passes, cohort_factors, write_factors, FactorRow, FuelConsumption,
};
use noxwatch::profiling::read_thresholds;
use noxwatch::screening::{
    fleet_screening_report, is_eligible, screen_passes, write_dispositions, write_verdicts,
    FleetReport, Method, ScreeningVerdict,
};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::store;

use super::profile::ProfileReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    #[serde(flatten)]
    pub report: FleetReport,
    pub dispositions: BTreeMap<String, usize>,
    pub flagged_vehicles: Vec<String>,
}

/// Contents of `screening_summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningSummary {
    pub passes: usize,
    pub eligible_passes: usize,
    pub national_limit_ppm: f64,
    pub window_days: i64,
    /// L/km used for the distance-specific factors.
    pub fuel_consumption: FuelConsumption,
    pub methods: Vec<MethodSummary>,
}

impl ScreeningSummary {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.report.method == m)
    }
}

/// Screens the pass store under `methods`, writes dispositions, verdicts and
/// emission factors.
pub fn run(cfg: &PipelineConfig, methods: &[Method]) -> Result<ScreeningSummary, CliError> {
    let dir = &cfg.paths.output_dir;
    let passes = store::read_passes(&store::input(dir, store::PASSES, "ingest")?)?;
    let th_path = store::input(dir, store::THRESHOLDS, "profile")?;
    let thresholds =
        read_thresholds(&store::read_text(&th_path)?).map_err(|e| CliError::at(&th_path, e))?;
    let profile: ProfileReport =
        store::read_json(&store::input(dir, store::PROFILE_REPORT, "profile")?)?;

    let outcome = screen_passes(&passes, &thresholds, &cfg.fuel, &cfg.vsp, &cfg.screening);
    let selected: BTreeSet<Method> = methods.iter().copied().collect();

    let dispositions: Vec<_> = outcome
        .dispositions
        .iter()
        .filter(|d| selected.contains(&d.method))
        .cloned()
        .collect();
    let path = dir.join(store::DISPOSITIONS);
    write_dispositions(store::create(&path)?, &dispositions).map_err(|e| CliError::at(&path, e))?;

    let verdicts: Vec<ScreeningVerdict> = outcome
        .verdicts
        .iter()
        .filter(|v| selected.contains(&v.method))
        .cloned()
        .collect();
    let path = dir.join(store::VERDICTS);
    write_verdicts(store::create(&path)?, &verdicts).map_err(|e| CliError::at(&path, e))?;

    let classified = classify_passes(&passes, &cfg.fuel, &cfg.vsp);
    let mut rows: Vec<FactorRow> = Vec::new();
    let mut summaries = Vec::new();
    for &m in &selected {
        let flagged: BTreeSet<String> =
            outcome.flagged(m).into_iter().map(str::to_string).collect();
        rows.extend(cohort_factors(
            &classified,
            m,
            &flagged,
            &profile.fuel_consumption,
            &cfg.fuel,
            &cfg.factors,
        ));
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for d in dispositions.iter().filter(|d| d.method == m) {
            *counts
                .entry(d.disposition.as_str().to_string())
                .or_default() += 1;
        }
        summaries.push(MethodSummary {
            report: fleet_screening_report(&outcome, m, cfg.screening.min_range_vehicles),
            dispositions: counts,
            flagged_vehicles: flagged.into_iter().collect(),
        });
    }
    let path = dir.join(store::FACTORS);
    write_factors(store::create(&path)?, &rows).map_err(|e| CliError::at(&path, e))?;

    let summary = ScreeningSummary {
        passes: passes.len(),
        eligible_passes: passes.iter().filter(|p| is_eligible(p)).count(),
        national_limit_ppm: cfg.screening.national_limit_ppm,
        window_days: cfg.screening.window_days,
        fuel_consumption: profile.fuel_consumption,
        methods: summaries,
    };
    store::write_json(&dir.join(store::SCREENING_SUMMARY), &summary)?;
    Ok(summary)
}
