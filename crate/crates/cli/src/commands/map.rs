use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, Write};

use rayon::prelude::*;

use noxwatch::factors::read_factors;
use noxwatch::reduction_map::{
    export_geojson, write_cells_csv, FactorLookup, MapSummary, ReductionGrid,
};
use noxwatch::screening::{read_flagged, Method};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::store;

use super::profile::CHUNK;

/// Accumulates the reduction grid of `method` over the trip store and writes
/// GeoJSON, CSV and summaries.
pub fn run(cfg: &PipelineConfig, method: Method) -> Result<MapSummary, CliError> {
    let dir = &cfg.paths.output_dir;
    let trips = store::read_trips(
        &store::input(dir, store::TRIPS, "ingest")?,
        cfg.segment.gap_interval_s,
    )?;

    let path = store::input(dir, store::VERDICTS, "screen")?;
    let file = File::open(&path).map_err(|e| CliError::at(&path, e))?;
    let mut flagged_by_method =
        read_flagged(BufReader::new(file)).map_err(|e| CliError::at(&path, e))?;
    let flagged: BTreeSet<String> = flagged_by_method.remove(&method).ok_or_else(|| {
        CliError::data(format!(
            "{} has no `{}` verdicts; run `noxwatch screen --method {}` first",
            path.display(),
            method.as_str(),
            method.as_str()
        ))
    })?;

    let path = store::input(dir, store::FACTORS, "screen")?;
    let file = File::open(&path).map_err(|e| CliError::at(&path, e))?;
    let records = read_factors(BufReader::new(file)).map_err(|e| CliError::at(&path, e))?;
    let lookup = FactorLookup::from_records(&records, method);

    cfg.grid
        .validate()
        .map_err(|e| CliError::Config(format!("[grid] {e}")))?;
    let partials: Vec<ReductionGrid> = trips
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = ReductionGrid::new(cfg.grid, cfg.day_window);
            for t in chunk {
                let is_he = flagged.contains(&t.trip.vehicle_id);
                g.add_trip(&t.trip, &t.accel, is_he, &lookup, &cfg.vsp);
            }
            g
        })
        .collect();
    let mut grid = ReductionGrid::new(cfg.grid, cfg.day_window);
    for g in partials {
        grid.merge(g);
    }

    let cells = grid.cells();
    let path = dir.join(store::GRID_GEOJSON);
    let mut w = store::create(&path)?;
    serde_json::to_writer_pretty(&mut w, &export_geojson(&cells, &cfg.grid))
        .map_err(|e| CliError::at(&path, e))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::at(&path, e))?;

    let path = dir.join(store::GRID_CSV);
    write_cells_csv(store::create(&path)?, &cells).map_err(|e| CliError::at(&path, e))?;

    let summary = grid.summary();
    let path = dir.join(store::MAP_SUMMARY_TXT);
    let mut w = store::create(&path)?;
    write!(w, "method: {}\n{summary}", method.as_str())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::at(&path, e))?;
    store::write_json(&dir.join(store::MAP_SUMMARY_JSON), &summary)?;
    Ok(summary)
}
