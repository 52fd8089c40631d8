//! Pipeline configuration, read from a TOML file with a schema version.
//!
//! Every section is optional and falls back to the engine defaults, so a
//! minimal file only needs `schema_version` and `[paths]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use noxwatch::binning::VspParams;
use noxwatch::emissions::FuelConstants;
use noxwatch::factors::FactorParams;
use noxwatch::ingest::{ObmColumns, RangeTable, RsdColumns, SegmentParams, TripCriteria};
use noxwatch::profiling::{ProfileConfig, ThresholdParams};
use noxwatch::reduction_map::{DayWindow, GridSpec};
use noxwatch::screening::{Method, ScreeningParams};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub obm_dir: PathBuf,
    pub rsd_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            obm_dir: "data/obm".into(),
            rsd_dir: "data/rsd".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Columns {
    pub obm: ObmColumns,
    pub rsd: RsdColumns,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    /// Which method's verdicts and factors drive the reduction map.
    pub method: Method,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            method: Method::ObmRsd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub paths: Paths,
    pub columns: Columns,
    pub fuel: FuelConstants,
    pub vsp: VspParams,
    pub ranges: RangeTable,
    pub segment: SegmentParams,
    pub trip: TripCriteria,
    pub profile: ProfileConfig,
    pub thresholds: ThresholdParams,
    pub screening: ScreeningParams,
    pub factors: FactorParams,
    pub grid: GridSpec,
    pub day_window: DayWindow,
    pub map: MapConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            paths: Paths::default(),
            columns: Columns::default(),
            fuel: FuelConstants::default(),
            vsp: VspParams::default(),
            ranges: RangeTable::default(),
            segment: SegmentParams::default(),
            trip: TripCriteria::default(),
            profile: ProfileConfig::default(),
            thresholds: ThresholdParams::default(),
            screening: ScreeningParams::default(),
            factors: FactorParams::default(),
            grid: GridSpec::default(),
            day_window: DayWindow::default(),
            map: MapConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl PipelineConfig {
    /// Parses and validates a config file. Relative paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let value: toml::Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        match value
            .get("schema_version")
            .and_then(toml::Value::as_integer)
        {
            Some(v) if v == i64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(config_err(format!(
                    "unsupported schema_version {v}, expected {SCHEMA_VERSION}"
                )))
            }
            None => return Err(config_err("missing schema_version")),
        }
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.paths.obm_dir,
            &mut self.paths.rsd_dir,
            &mut self.paths.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Sanity bounds on every numeric override.
    pub fn validate(&self) -> Result<(), CliError> {
        self.fuel
            .validate()
            .map_err(|e| config_err(format!("[fuel] {e}")))?;
        self.vsp
            .validate()
            .map_err(|e| config_err(format!("[vsp] {e}")))?;
        if !self.ranges.is_well_formed() {
            return Err(config_err("[ranges] every range needs finite min <= max"));
        }
        if self.segment.idle_gap_s <= 0 || self.segment.gap_interval_s <= 0 {
            return Err(config_err("[segment] gaps must be positive"));
        }
        let t = &self.trip;
        if t.min_duration_s < 0
            || !(0.0..=1.0).contains(&t.max_gap_fraction)
            || !(0.0..=1.0).contains(&t.max_invalid_fraction)
            || t.frozen_run_len < 2
        {
            return Err(config_err(
                "[trip] fractions must lie in [0, 1] and frozen_run_len >= 2",
            ));
        }
        if !(self.profile.dwell_cap_s.is_finite() && self.profile.dwell_cap_s > 0.0) {
            return Err(config_err("[profile] dwell_cap_s must be positive"));
        }
        let th = &self.thresholds;
        if !(th.multiplier.is_finite() && th.multiplier > 0.0 && th.multiplier <= 100.0)
            || th.min_samples == 0
        {
            return Err(config_err(
                "[thresholds] multiplier must be in (0, 100] and min_samples >= 1",
            ));
        }
        let s = &self.screening;
        if !(s.national_limit_ppm.is_finite() && s.national_limit_ppm > 0.0)
            || !(1..=3660).contains(&s.window_days)
        {
            return Err(config_err(
                "[screening] limit must be positive and window_days in 1..=3660",
            ));
        }
        let k = &self.factors.constants;
        if [k.carbon, k.fuel_carbon, k.carbon_mass, k.hc_weight]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
            || k.carbon_mass == 0.0
        {
            return Err(config_err(
                "[factors.constants] must be finite, non-negative, carbon_mass > 0",
            ));
        }
        self.grid
            .validate()
            .map_err(|e| config_err(format!("[grid] {e}")))?;
        self.day_window
            .validate()
            .map_err(|e| config_err(format!("[day_window] {e}")))?;
        Ok(())
    }

    /// Fails unless `dir` exists; used for the input directories of a stage.
    pub fn require_dir(dir: &Path, what: &str) -> Result<(), CliError> {
        if dir.is_dir() {
            Ok(())
        } else {
            Err(CliError::Config(format!(
                "{what} directory {} does not exist",
                dir.display()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_file() {
        let cfg = PipelineConfig::from_toml(
            "schema_version = 1\n[paths]\nobm_dir = \"a\"\nrsd_dir = \"b\"\noutput_dir = \"c\"\n[thresholds]\nmultiplier = 1.5\n",
        )
        .unwrap();
        assert_eq!(cfg.thresholds.multiplier, 1.5);
        assert_eq!(cfg.thresholds.min_samples, 100);
        assert_eq!(cfg.screening.window_days, 183);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(PipelineConfig::from_toml("[paths]\n").is_err());
        assert!(PipelineConfig::from_toml("schema_version = 2\n").is_err());
        assert!(PipelineConfig::from_toml("schema_version = 1\nbogus = 3\n").is_err());
        assert!(
            PipelineConfig::from_toml("schema_version = 1\n[thresholds]\nmultiplier = -1.0\n")
                .is_err()
        );
        assert!(
            PipelineConfig::from_toml("schema_version = 1\n[grid]\ncell_size_m = 0.0\n").is_err()
        );
    }
}
