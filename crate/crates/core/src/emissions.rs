//! Instantaneous NOx / CO2 emission rates from on-board monitoring records and
//! NOx/CO2 ratios from both OBM and remote-sensing measurements.
//!
//! OBM rates follow the usual sensor-based mass balance:
//!
//! ```text
//! q_t     = q_maf + q_fr * rho                 (kg/h)
//! ER_NOx  = mu * NOx_out * q_t / 3600          (g/s)
//! ER_CO2  = q_fr * beta / 3600                 (g/s)
//! ```
//!
//! `q_t` is the total exhaust mass flow (intake air plus burned fuel). Remote
//! sensing reports NO only, so NOx is reconstructed with a fixed primary NO2
//! fraction: `NOx/CO2 = (NO / (1 - f_no2)) / CO2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmissionsError {
    #[error("non-finite or negative input: {0}")]
    NonFiniteInput(&'static str),
    #[error("fuel rate is zero, NOx/CO2 ratio undefined")]
    ZeroFuelRate,
    #[error("CO2 concentration must be positive")]
    ZeroDenominator,
    #[error("invalid fuel constants: {0}")]
    InvalidConstants(&'static str),
}

/// Fuel and exhaust constants used by the rate and ratio equations.
///
/// Defaults are the China V heavy-duty diesel values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuelConstants {
    /// Exhaust NOx density ratio.
    pub mu: f64,
    /// Fuel density, kg/L.
    pub rho: f64,
    /// CO2 produced per litre of fuel burned, g/L.
    pub beta: f64,
    /// Primary NO2 fraction of NOx.
    pub f_no2: f64,
}

impl Default for FuelConstants {
    fn default() -> Self {
        Self {
            mu: 0.001587,
            rho: 0.85,
            beta: 2684.0,
            f_no2: 0.40,
        }
    }
}

impl FuelConstants {
    pub fn validate(&self) -> Result<(), EmissionsError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.mu) {
            return Err(EmissionsError::InvalidConstants("mu"));
        }
        if !positive(self.rho) {
            return Err(EmissionsError::InvalidConstants("rho"));
        }
        if !positive(self.beta) {
            return Err(EmissionsError::InvalidConstants("beta"));
        }
        if !(positive(self.f_no2) && self.f_no2 < 1.0) {
            return Err(EmissionsError::InvalidConstants("f_no2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSource {
    Obm,
    Rsd,
}

/// One evaluated emission state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionSample {
    /// g/s
    pub er_nox: f64,
    /// g/s
    pub er_co2: f64,
    /// `None` when the CO2 rate is zero.
    pub ratio_nox_co2: Option<f64>,
    pub source: SampleSource,
}

fn check(value: f64, name: &'static str) -> Result<f64, EmissionsError> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(EmissionsError::NonFiniteInput(name))
    }
}

/// Total exhaust mass flow in kg/h.
pub fn exhaust_mass_flow(q_maf: f64, q_fr: f64, c: &FuelConstants) -> f64 {
    q_maf + q_fr * c.rho
}

/// NOx mass emission rate in g/s.
pub fn nox_rate(
    nox_out: f64,
    q_maf: f64,
    q_fr: f64,
    c: &FuelConstants,
) -> Result<f64, EmissionsError> {
    let nox_out = check(nox_out, "nox_out")?;
    let q_maf = check(q_maf, "q_maf")?;
    let q_fr = check(q_fr, "q_fr")?;
    Ok(c.mu * nox_out * exhaust_mass_flow(q_maf, q_fr, c) / SECONDS_PER_HOUR)
}

/// CO2 mass emission rate in g/s.
pub fn co2_rate(q_fr: f64, c: &FuelConstants) -> Result<f64, EmissionsError> {
    let q_fr = check(q_fr, "q_fr")?;
    Ok(q_fr * c.beta / SECONDS_PER_HOUR)
}

/// NOx/CO2 mass ratio of one OBM record.
pub fn obm_ratio(
    nox_out: f64,
    q_maf: f64,
    q_fr: f64,
    c: &FuelConstants,
) -> Result<f64, EmissionsError> {
    let nox = nox_rate(nox_out, q_maf, q_fr, c)?;
    let co2 = co2_rate(q_fr, c)?;
    if co2 == 0.0 {
        return Err(EmissionsError::ZeroFuelRate);
    }
    Ok(nox / co2)
}

/// Evaluates rates and ratio for one OBM record. A zero fuel rate is not an
/// error here; the ratio is simply absent.
pub fn obm_sample(
    nox_out: f64,
    q_maf: f64,
    q_fr: f64,
    c: &FuelConstants,
) -> Result<EmissionSample, EmissionsError> {
    let er_nox = nox_rate(nox_out, q_maf, q_fr, c)?;
    let er_co2 = co2_rate(q_fr, c)?;
    Ok(EmissionSample {
        er_nox,
        er_co2,
        ratio_nox_co2: (er_co2 > 0.0).then(|| er_nox / er_co2),
        source: SampleSource::Obm,
    })
}

/// NOx/CO2 from absolute NO and CO2 plume concentrations (same units).
pub fn rsd_ratio(no_ppm: f64, co2: f64, c: &FuelConstants) -> Result<f64, EmissionsError> {
    let no_ppm = check(no_ppm, "no_ppm")?;
    if !(co2.is_finite() && co2 > 0.0) {
        return Err(EmissionsError::ZeroDenominator);
    }
    Ok(no_ppm / (1.0 - c.f_no2) / co2)
}

/// NOx/CO2 from an instrument-reported NO/CO2 ratio.
pub fn rsd_ratio_from_q3(q3_raw: f64, c: &FuelConstants) -> Result<f64, EmissionsError> {
    let q3_raw = check(q3_raw, "q3_raw")?;
    Ok(q3_raw / (1.0 - c.f_no2))
}
