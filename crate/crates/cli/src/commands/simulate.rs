use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use noxwatch::synthfleet::{generate, write_dataset, FleetSpec};

use crate::config::{Paths, PipelineConfig};
use crate::error::CliError;
use crate::store;

/// Config written next to a generated dataset so the pipeline can run on it directly.
pub const DATASET_CONFIG: &str = "noxwatch.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub out_dir: PathBuf,
    pub config: PathBuf,
    pub manifest: PathBuf,
    pub seed: u64,
    pub n_vehicles: usize,
    pub n_high_emitters: usize,
    pub n_obm_rows: usize,
    pub n_rsd_passes: usize,
    pub corrupted_rows: usize,
    pub dropped_records: usize,
    pub fuel_consumption_l_per_100km: f64,
    pub analytic_relative_pct: f64,
}

pub fn load_spec(path: &Path) -> Result<FleetSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Generates a synthetic fleet into `out` (`obm/`, `rsd/`, `manifest.json`)
/// plus a pipeline config pointing at it.
pub fn run(spec: &FleetSpec, out: &Path) -> Result<SimulateSummary, CliError> {
    spec.validate()
        .map_err(|e| CliError::Config(format!("fleet spec: {e}")))?;
    let fleet = generate(spec).map_err(|e| CliError::Config(format!("fleet spec: {e}")))?;
    let paths = write_dataset(&fleet, out).map_err(|e| CliError::at(out, e))?;

    let cfg = PipelineConfig {
        paths: Paths {
            obm_dir: "obm".into(),
            rsd_dir: "rsd".into(),
            output_dir: "out".into(),
        },
        ..PipelineConfig::default()
    };
    let config = out.join(DATASET_CONFIG);
    let mut w = store::create(&config)?;
    w.write_all(cfg.to_toml().as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::at(&config, e))?;

    let truth = &fleet.truth;
    log::info!(
        "wrote {} OBM rows and {} passes to {}",
        truth.n_obm_rows,
        truth.n_rsd_passes,
        out.display()
    );
    Ok(SimulateSummary {
        out_dir: out.to_path_buf(),
        config,
        manifest: paths.manifest,
        seed: truth.seed,
        n_vehicles: truth.n_vehicles,
        n_high_emitters: truth.he_vehicle_ids.len(),
        n_obm_rows: truth.n_obm_rows,
        n_rsd_passes: truth.n_rsd_passes,
        corrupted_rows: truth.corrupted_rows,
        dropped_records: truth.dropped_records,
        fuel_consumption_l_per_100km: 100.0 * truth.fuel_consumption_l_per_km,
        analytic_relative_pct: truth.analytic.relative_pct,
    })
}
