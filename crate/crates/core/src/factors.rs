//! Fuel-specific and distance-specific NOx emission factors for normally
//! behaving vehicles (NBV) and high emitters (HE), per speed range.
//!
//! Cohort means of the per-pass ratios are fed to the fuel-specific formula
//! once (mean of ratios), not averaged per pass afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binning::{classify_state, SpeedRange, VspParams};
use crate::emissions::{rsd_ratio_from_q3, FuelConstants};
use crate::ingest::RsdPass;
use crate::screening::{is_eligible, Method};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorsError {
    #[error("fuel consumption must be positive, got {0}")]
    NonPositiveFC(f64),
    #[error("no passes in the {cohort} cohort for {scope}")]
    EmptyCohort { cohort: Cohort, scope: Scope },
    #[error("bad factor table: {0}")]
    File(String),
}

/// Calibration constants of the fuel-specific factor:
/// `carbon · q3 · fuel_carbon / ((1 + q1 + hc_weight · q2) · carbon_mass)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfConstants {
    pub carbon: f64,
    pub fuel_carbon: f64,
    pub carbon_mass: f64,
    pub hc_weight: f64,
}

impl Default for EfConstants {
    fn default() -> Self {
        Self {
            carbon: 30.0,
            fuel_carbon: 860.0,
            carbon_mass: 12.0,
            hc_weight: 6.0,
        }
    }
}

/// g NOx per kg fuel from CO/CO2, HC/CO2 and NOx/CO2.
pub fn fuel_specific_ef_with(q1: f64, q2: f64, q3: f64, k: &EfConstants) -> f64 {
    k.carbon * q3 * k.fuel_carbon / ((1.0 + q1 + k.hc_weight * q2) * k.carbon_mass)
}

pub fn fuel_specific_ef(q1: f64, q2: f64, q3: f64) -> f64 {
    fuel_specific_ef_with(q1, q2, q3, &EfConstants::default())
}

/// g/km from g/kg and L/km.
pub fn distance_specific_ef(ef_fuel: f64, fc: f64, c: &FuelConstants) -> Result<f64, FactorsError> {
    if fc.is_nan() || fc <= 0.0 {
        return Err(FactorsError::NonPositiveFC(fc));
    }
    Ok(ef_fuel * fc * c.rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cohort {
    #[serde(rename = "nbv")]
    Nbv,
    #[serde(rename = "he")]
    He,
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cohort::Nbv => "NBV",
            Cohort::He => "HE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Range(SpeedRange),
    Total,
}

impl Scope {
    pub const ALL: [Scope; 4] = [
        Scope::Range(SpeedRange::Low),
        Scope::Range(SpeedRange::Medium),
        Scope::Range(SpeedRange::High),
        Scope::Total,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Range(r) => r.as_str(),
            Scope::Total => "total",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "total" => Some(Scope::Total),
            _ => s.parse().ok().map(Scope::Range),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FcMode {
    /// One fleet-wide figure for every range.
    #[default]
    Fleet,
    /// Range-specific figures, falling back to the fleet figure.
    PerRange,
}

/// Fuel consumption in L/km.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuelConsumption {
    pub fleet: f64,
    #[serde(default)]
    pub by_range: BTreeMap<SpeedRange, f64>,
}

impl FuelConsumption {
    pub fn fleet(fc: f64) -> Self {
        Self {
            fleet: fc,
            by_range: BTreeMap::new(),
        }
    }

    pub fn for_scope(&self, scope: Scope, mode: FcMode) -> f64 {
        match (mode, scope) {
            (FcMode::PerRange, Scope::Range(r)) => {
                self.by_range.get(&r).copied().unwrap_or(self.fleet)
            }
            _ => self.fleet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionFactor {
    pub cohort: Cohort,
    pub scope: Scope,
    pub n_passes: usize,
    pub n_vehicles: usize,
    pub mean_q1: f64,
    pub mean_q2: f64,
    /// Mean NOx/CO2 (NO converted to NOx).
    pub mean_q3: f64,
    /// g/kg
    pub ef_fuel: f64,
    /// g/km
    pub ef_distance: f64,
    /// L/km used for `ef_distance`.
    pub fc: f64,
}

/// Mergeable sums behind one cohort cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CohortSums {
    pub n: usize,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub vehicles: BTreeSet<String>,
}

impl CohortSums {
    pub fn add(&mut self, vehicle_id: &str, q1: f64, q2: f64, q3: f64) {
        self.n += 1;
        self.q1 += q1;
        self.q2 += q2;
        self.q3 += q3;
        if !self.vehicles.contains(vehicle_id) {
            self.vehicles.insert(vehicle_id.to_string());
        }
    }

    pub fn merge(&mut self, other: CohortSums) {
        self.n += other.n;
        self.q1 += other.q1;
        self.q2 += other.q2;
        self.q3 += other.q3;
        self.vehicles.extend(other.vehicles);
    }

    pub fn means(&self) -> Option<(f64, f64, f64)> {
        (self.n > 0).then(|| {
            let n = self.n as f64;
            (self.q1 / n, self.q2 / n, self.q3 / n)
        })
    }

    pub fn factor(
        &self,
        cohort: Cohort,
        scope: Scope,
        fc: f64,
        c: &FuelConstants,
        k: &EfConstants,
    ) -> Result<EmissionFactor, FactorsError> {
        let (q1, q2, q3) = self
            .means()
            .ok_or(FactorsError::EmptyCohort { cohort, scope })?;
        let ef_fuel = fuel_specific_ef_with(q1, q2, q3, k);
        Ok(EmissionFactor {
            cohort,
            scope,
            n_passes: self.n,
            n_vehicles: self.vehicles.len(),
            mean_q1: q1,
            mean_q2: q2,
            mean_q3: q3,
            ef_fuel,
            ef_distance: distance_specific_ef(ef_fuel, fc, c)?,
            fc,
        })
    }
}

/// Per-pass inputs after eligibility and classification.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedPass<'a> {
    pub vehicle_id: &'a str,
    pub range: SpeedRange,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

/// Eligible passes outside braking and idle with a usable ratio.
pub fn classify_passes<'a>(
    passes: &'a [RsdPass],
    c: &FuelConstants,
    vp: &VspParams,
) -> Vec<ClassifiedPass<'a>> {
    passes
        .iter()
        .filter(|p| is_eligible(p))
        .filter_map(|p| {
            let (bin, _) = classify_state(p.speed, p.accel, vp).ok()?;
            let range = bin.speed_class().range()?;
            let q3 = rsd_ratio_from_q3(p.q3_raw, c).ok()?;
            Some(ClassifiedPass {
                vehicle_id: &p.vehicle_id,
                range,
                q1: p.q1,
                q2: p.q2,
                q3,
            })
        })
        .collect()
}

/// One row of the factor table: both cohorts of one method and scope.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorRow {
    pub method: Method,
    pub scope: Scope,
    pub n_vehicles: usize,
    pub he_pct: Option<f64>,
    pub nbv: Result<EmissionFactor, FactorsError>,
    pub he: Result<EmissionFactor, FactorsError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorParams {
    pub constants: EfConstants,
    pub fc_mode: FcMode,
}

/// Factors of one method. A vehicle belongs to the HE cohort in every scope
/// once it is flagged under that method.
pub fn cohort_factors(
    passes: &[ClassifiedPass<'_>],
    method: Method,
    flagged: &BTreeSet<String>,
    fc: &FuelConsumption,
    c: &FuelConstants,
    params: &FactorParams,
) -> Vec<FactorRow> {
    let mut sums: BTreeMap<(Scope, Cohort), CohortSums> = BTreeMap::new();
    for p in passes {
        let cohort = if flagged.contains(p.vehicle_id) {
            Cohort::He
        } else {
            Cohort::Nbv
        };
        for scope in [Scope::Range(p.range), Scope::Total] {
            sums.entry((scope, cohort))
                .or_default()
                .add(p.vehicle_id, p.q1, p.q2, p.q3);
        }
    }
    let empty = CohortSums::default();
    Scope::ALL
        .into_iter()
        .map(|scope| {
            let nbv = sums.get(&(scope, Cohort::Nbv)).unwrap_or(&empty);
            let he = sums.get(&(scope, Cohort::He)).unwrap_or(&empty);
            let n_vehicles = nbv.vehicles.union(&he.vehicles).count();
            let fc = fc.for_scope(scope, params.fc_mode);
            FactorRow {
                method,
                scope,
                n_vehicles,
                he_pct: (n_vehicles > 0)
                    .then(|| 100.0 * he.vehicles.len() as f64 / n_vehicles as f64),
                nbv: nbv.factor(Cohort::Nbv, scope, fc, c, &params.constants),
                he: he.factor(Cohort::He, scope, fc, c, &params.constants),
            }
        })
        .collect()
}

/// Average of the per-pass fuel-specific factors; the alternative to the
/// mean-of-ratios convention, kept for comparison.
pub fn per_pass_mean_ef(passes: &[ClassifiedPass<'_>], k: &EfConstants) -> Option<f64> {
    (!passes.is_empty()).then(|| {
        passes
            .iter()
            .map(|p| fuel_specific_ef_with(p.q1, p.q2, p.q3, k))
            .sum::<f64>()
            / passes.len() as f64
    })
}

/// Flat CSV form of a [`FactorRow`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub method: Method,
    pub speed_range: String,
    pub n_vehicles: usize,
    pub he_pct: Option<f64>,
    pub n_nbv_passes: usize,
    pub n_he_passes: usize,
    /// g/km
    pub ef_nbv: Option<f64>,
    pub ef_he: Option<f64>,
    /// g/kg
    pub ef_fuel_nbv: Option<f64>,
    pub ef_fuel_he: Option<f64>,
    pub fc: f64,
}

impl FactorRecord {
    pub fn scope(&self) -> Option<Scope> {
        Scope::parse(&self.speed_range)
    }
}

impl From<&FactorRow> for FactorRecord {
    fn from(r: &FactorRow) -> Self {
        let ok = |e: &Result<EmissionFactor, FactorsError>| e.as_ref().ok().cloned();
        let (nbv, he) = (ok(&r.nbv), ok(&r.he));
        FactorRecord {
            method: r.method,
            speed_range: r.scope.to_string(),
            n_vehicles: r.n_vehicles,
            he_pct: r.he_pct,
            n_nbv_passes: nbv.as_ref().map_or(0, |f| f.n_passes),
            n_he_passes: he.as_ref().map_or(0, |f| f.n_passes),
            ef_nbv: nbv.as_ref().map(|f| f.ef_distance),
            ef_he: he.as_ref().map(|f| f.ef_distance),
            ef_fuel_nbv: nbv.as_ref().map(|f| f.ef_fuel),
            ef_fuel_he: he.as_ref().map(|f| f.ef_fuel),
            fc: nbv.or(he).map_or(0.0, |f| f.fc),
        }
    }
}

pub fn write_factors<W: Write>(w: W, rows: &[FactorRow]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(FactorRecord::from(r))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_factors<R: std::io::Read>(r: R) -> Result<Vec<FactorRecord>, FactorsError> {
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(r).deserialize::<FactorRecord>() {
        let rec = rec.map_err(|e| FactorsError::File(e.to_string()))?;
        if rec.scope().is_none() {
            return Err(FactorsError::File(format!(
                "unknown speed range `{}`",
                rec.speed_range
            )));
        }
        rows.push(rec);
    }
    Ok(rows)
}
