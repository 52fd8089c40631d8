//! NOx telemetry analytics for heavy-duty diesel fleets.
//!
//! On-board monitoring (OBM) trips are cleaned and binned into operating
//! modes to build per-mode NOx/CO2 profiles and high-emitter thresholds.
//! Roadside remote-sensing (RSD) passes are screened against those
//! thresholds, emission factors are derived per cohort, and the reduction
//! potential of repairing flagged vehicles is mapped onto a spatial grid.

pub mod binning;
pub mod emissions;
pub mod factors;
pub mod ingest;
pub mod profiling;
pub mod reduction_map;
pub mod screening;
pub mod synthfleet;
pub mod versioned;
