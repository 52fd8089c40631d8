use serde::{Deserialize, Serialize};

use noxwatch::reduction_map::MapSummary;

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::store;

use super::ingest::QualityReport;
use super::profile::ProfileReport;
use super::screen::ScreeningSummary;

/// Stage summaries found in the output directory; stages not yet run are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub quality: Option<QualityReport>,
    pub profile: Option<ProfileReport>,
    pub screening: Option<ScreeningSummary>,
    pub map: Option<MapSummary>,
}

fn load<T: serde::de::DeserializeOwned>(
    cfg: &PipelineConfig,
    name: &str,
) -> Result<Option<T>, CliError> {
    let path = cfg.paths.output_dir.join(name);
    if path.is_file() {
        store::read_json(&path).map(Some)
    } else {
        Ok(None)
    }
}

pub fn run(cfg: &PipelineConfig) -> Result<PipelineReport, CliError> {
    let report = PipelineReport {
        quality: load(cfg, store::QUALITY_REPORT)?,
        profile: load(cfg, store::PROFILE_REPORT)?,
        screening: load(cfg, store::SCREENING_SUMMARY)?,
        map: load(cfg, store::MAP_SUMMARY_JSON)?,
    };
    if report.quality.is_none()
        && report.profile.is_none()
        && report.screening.is_none()
        && report.map.is_none()
    {
        return Err(CliError::data(format!(
            "no stage outputs in {}; run `noxwatch ingest` first",
            cfg.paths.output_dir.display()
        )));
    }
    store::write_json(&cfg.paths.output_dir.join(store::REPORT), &report)?;
    Ok(report)
}
