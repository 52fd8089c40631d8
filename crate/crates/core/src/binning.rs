//! Vehicle specific power and the 22 operating-mode bins.
//!
//! Bins are keyed by speed class and a VSP band. All intervals are closed on
//! the left and open on the right. Braking (acceleration below -0.89 m/s²)
//! takes precedence over idle, and idle (below 1.6 km/h) over every speed
//! class.
//!
//! The low-speed column has no separate cells at 4..6 and >= 8 kW/ton, so
//! everything at or above 4 lands in `Bin16`. The high-speed column starts
//! at `Bin33`, which covers every VSP below 0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BinningError {
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("unknown operating bin `{0}`")]
    UnknownBin(String),
    #[error("invalid VSP parameters: {0}")]
    InvalidParams(&'static str),
}

/// Converts km/h to m/s. This is the only place the factor lives.
#[inline]
pub fn kmh_to_ms(kmh: f64) -> f64 {
    kmh / 3.6
}

/// Road-load parameters for VSP, per ton of vehicle mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VspParams {
    /// Gravitational acceleration, m/s².
    pub g: f64,
    /// Road grade, radians.
    pub theta: f64,
    /// Rolling resistance, kW·s/m/ton.
    pub a_over_m: f64,
    /// Rotational resistance, kW·s²/m²/ton.
    pub b_over_m: f64,
    /// Aerodynamic drag, kW·s³/m³/ton.
    pub c_over_m: f64,
}

impl Default for VspParams {
    fn default() -> Self {
        Self {
            g: 9.8,
            theta: 0.0,
            a_over_m: 0.0875,
            b_over_m: 0.0,
            c_over_m: 0.000331,
        }
    }
}

impl VspParams {
    pub fn validate(&self) -> Result<(), BinningError> {
        if !(self.g.is_finite() && self.g > 0.0) {
            return Err(BinningError::InvalidParams("g"));
        }
        if !self.theta.is_finite() {
            return Err(BinningError::InvalidParams("theta"));
        }
        for (v, name) in [
            (self.a_over_m, "a_over_m"),
            (self.b_over_m, "b_over_m"),
            (self.c_over_m, "c_over_m"),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(BinningError::InvalidParams(name));
            }
        }
        Ok(())
    }
}

/// Vehicle specific power in kW/ton for speed `v` (m/s) and acceleration `a` (m/s²).
pub fn vsp(v: f64, a: f64, p: &VspParams) -> Result<f64, BinningError> {
    if !v.is_finite() || v < 0.0 {
        return Err(BinningError::NonFiniteInput("v"));
    }
    if !a.is_finite() {
        return Err(BinningError::NonFiniteInput("a"));
    }
    Ok(a * v
        + p.g * v * p.theta.sin()
        + p.a_over_m * v
        + p.b_over_m * v * v
        + p.c_over_m * v * v * v)
}

/// Speed class of an operating bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SpeedClass {
    Braking,
    Idle,
    Low,
    Medium,
    High,
}

impl SpeedClass {
    pub fn range(self) -> Option<SpeedRange> {
        match self {
            SpeedClass::Low => Some(SpeedRange::Low),
            SpeedClass::Medium => Some(SpeedRange::Medium),
            SpeedClass::High => Some(SpeedRange::High),
            SpeedClass::Braking | SpeedClass::Idle => None,
        }
    }
}

/// The three screenable speed ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedRange {
    Low,
    Medium,
    High,
}

impl SpeedRange {
    pub const ALL: [SpeedRange; 3] = [SpeedRange::Low, SpeedRange::Medium, SpeedRange::High];

    pub fn as_str(self) -> &'static str {
        match self {
            SpeedRange::Low => "low",
            SpeedRange::Medium => "medium",
            SpeedRange::High => "high",
        }
    }

    pub fn bins(self) -> impl Iterator<Item = OperatingBin> {
        OperatingBin::ALL
            .into_iter()
            .filter(move |b| b.speed_class().range() == Some(self))
    }
}

impl fmt::Display for SpeedRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SpeedRange {
    type Err = BinningError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(SpeedRange::Low),
            "medium" => Ok(SpeedRange::Medium),
            "high" => Ok(SpeedRange::High),
            other => Err(BinningError::UnknownBin(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OperatingBin {
    Bin0,
    Bin1,
    Bin11,
    Bin12,
    Bin13,
    Bin14,
    Bin15,
    Bin16,
    Bin21,
    Bin22,
    Bin23,
    Bin24,
    Bin25,
    Bin26,
    Bin27,
    Bin28,
    Bin33,
    Bin34,
    Bin35,
    Bin36,
    Bin37,
    Bin38,
}

impl OperatingBin {
    pub const COUNT: usize = 22;

    pub const ALL: [OperatingBin; Self::COUNT] = [
        OperatingBin::Bin0,
        OperatingBin::Bin1,
        OperatingBin::Bin11,
        OperatingBin::Bin12,
        OperatingBin::Bin13,
        OperatingBin::Bin14,
        OperatingBin::Bin15,
        OperatingBin::Bin16,
        OperatingBin::Bin21,
        OperatingBin::Bin22,
        OperatingBin::Bin23,
        OperatingBin::Bin24,
        OperatingBin::Bin25,
        OperatingBin::Bin26,
        OperatingBin::Bin27,
        OperatingBin::Bin28,
        OperatingBin::Bin33,
        OperatingBin::Bin34,
        OperatingBin::Bin35,
        OperatingBin::Bin36,
        OperatingBin::Bin37,
        OperatingBin::Bin38,
    ];

    /// Numeric label as printed in reports (0, 1, 11..16, 21..28, 33..38).
    pub fn id(self) -> u8 {
        use OperatingBin::*;
        match self {
            Bin0 => 0,
            Bin1 => 1,
            Bin11 => 11,
            Bin12 => 12,
            Bin13 => 13,
            Bin14 => 14,
            Bin15 => 15,
            Bin16 => 16,
            Bin21 => 21,
            Bin22 => 22,
            Bin23 => 23,
            Bin24 => 24,
            Bin25 => 25,
            Bin26 => 26,
            Bin27 => 27,
            Bin28 => 28,
            Bin33 => 33,
            Bin34 => 34,
            Bin35 => 35,
            Bin36 => 36,
            Bin37 => 37,
            Bin38 => 38,
        }
    }

    /// Position in [`OperatingBin::ALL`], usable as a dense array index.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.id() == id)
    }

    pub fn speed_class(self) -> SpeedClass {
        match self.id() {
            0 => SpeedClass::Braking,
            1 => SpeedClass::Idle,
            11..=16 => SpeedClass::Low,
            21..=28 => SpeedClass::Medium,
            _ => SpeedClass::High,
        }
    }
}

impl fmt::Display for OperatingBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bin{}", self.id())
    }
}

impl FromStr for OperatingBin {
    type Err = BinningError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let digits = t
            .strip_prefix("Bin")
            .or_else(|| t.strip_prefix("bin"))
            .unwrap_or(t)
            .trim();
        digits
            .parse::<u8>()
            .ok()
            .and_then(OperatingBin::from_id)
            .ok_or_else(|| BinningError::UnknownBin(s.to_string()))
    }
}

/// Acceleration below which a state is braking, m/s².
pub const BRAKING_ACCEL: f64 = -0.89;
/// Speed below which a state is idle, km/h.
pub const IDLE_SPEED_KMH: f64 = 1.6;
pub const MEDIUM_SPEED_KMH: f64 = 30.0;
pub const HIGH_SPEED_KMH: f64 = 60.0;

/// Classifies a driving state into one of the 22 operating-mode bins.
///
/// `speed` is in km/h, `accel` in m/s², `vsp` in kW/ton. Non-finite VSP values
/// fall into the open-ended bands; callers are expected to pass finite values.
pub fn classify(speed: f64, accel: f64, vsp: f64) -> OperatingBin {
    use OperatingBin::*;

    if accel < BRAKING_ACCEL {
        return Bin0;
    }
    if speed < IDLE_SPEED_KMH {
        return Bin1;
    }
    if speed < MEDIUM_SPEED_KMH {
        if vsp < -4.0 {
            Bin11
        } else if vsp < -2.0 {
            Bin12
        } else if vsp < 0.0 {
            Bin13
        } else if vsp < 2.0 {
            Bin14
        } else if vsp < 4.0 {
            Bin15
        } else {
            Bin16
        }
    } else if speed < HIGH_SPEED_KMH {
        if vsp < -4.0 {
            Bin21
        } else if vsp < -2.0 {
            Bin22
        } else if vsp < 0.0 {
            Bin23
        } else if vsp < 2.0 {
            Bin24
        } else if vsp < 4.0 {
            Bin25
        } else if vsp < 6.0 {
            Bin26
        } else if vsp < 8.0 {
            Bin27
        } else {
            Bin28
        }
    } else if vsp < 0.0 {
        Bin33
    } else if vsp < 2.0 {
        Bin34
    } else if vsp < 4.0 {
        Bin35
    } else if vsp < 6.0 {
        Bin36
    } else if vsp < 8.0 {
        Bin37
    } else {
        Bin38
    }
}

/// Computes VSP from (km/h, m/s²) and classifies the state.
pub fn classify_state(
    speed_kmh: f64,
    accel: f64,
    p: &VspParams,
) -> Result<(OperatingBin, f64), BinningError> {
    if !speed_kmh.is_finite() || speed_kmh < 0.0 {
        return Err(BinningError::NonFiniteInput("speed"));
    }
    let power = vsp(kmh_to_ms(speed_kmh), accel, p)?;
    Ok((classify(speed_kmh, accel, power), power))
}

/// Speed class of a bin.
pub fn speed_range(bin: OperatingBin) -> SpeedClass {
    bin.speed_class()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vsp_examples() {
        let p = VspParams::default();
        assert!((vsp(10.0, 0.0, &p).unwrap() - 1.206).abs() < 1e-12);
        assert!((vsp(15.0, 0.5, &p).unwrap() - 9.929625).abs() < 1e-12);
        assert_eq!(vsp(0.0, 3.0, &p).unwrap(), 0.0);
        assert_eq!(vsp(0.0, -2.0, &p).unwrap(), 0.0);
        assert!(vsp(-1.0, 0.0, &p).is_err());
        assert!(vsp(1.0, f64::NAN, &p).is_err());
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(50.0, 0.3, 9.0), OperatingBin::Bin28);
        assert_eq!(classify(70.0, -1.2, 3.0), OperatingBin::Bin0);
        assert_eq!(classify(0.5, 0.0, 1.0), OperatingBin::Bin1);
        assert_eq!(classify(20.0, 0.4, 7.0), OperatingBin::Bin16);
    }

    #[test]
    fn boundaries_are_left_closed() {
        assert_eq!(classify(30.0, 0.0, 0.0).speed_class(), SpeedClass::Medium);
        assert_eq!(classify(60.0, 0.0, 0.0).speed_class(), SpeedClass::High);
        assert_eq!(classify(1.6, 0.0, 0.0).speed_class(), SpeedClass::Low);
        assert_eq!(classify(40.0, 0.0, -4.0), OperatingBin::Bin22);
        assert_eq!(classify(40.0, 0.0, 8.0), OperatingBin::Bin28);
        assert_eq!(classify(70.0, 0.0, 0.0), OperatingBin::Bin34);
        assert_eq!(classify(70.0, 0.0, -0.0001), OperatingBin::Bin33);
        assert_eq!(classify(70.0, BRAKING_ACCEL, 0.0), OperatingBin::Bin34);
        // braking wins over idle
        assert_eq!(classify(0.0, -1.0, 0.0), OperatingBin::Bin0);
    }

    #[test]
    fn merged_cells() {
        assert_eq!(classify(20.0, 0.0, 5.0), OperatingBin::Bin16);
        assert_eq!(classify(20.0, 0.0, 100.0), OperatingBin::Bin16);
        assert_eq!(classify(80.0, 0.0, -10.0), OperatingBin::Bin33);
        assert_eq!(classify(80.0, 0.0, -1.0), OperatingBin::Bin33);
    }

    #[test]
    fn speed_range_lookup() {
        assert_eq!(speed_range(OperatingBin::Bin24), SpeedClass::Medium);
        assert_eq!(speed_range(OperatingBin::Bin38), SpeedClass::High);
        assert_eq!(speed_range(OperatingBin::Bin0), SpeedClass::Braking);
        assert_eq!(speed_range(OperatingBin::Bin1), SpeedClass::Idle);
        assert_eq!(speed_range(OperatingBin::Bin11), SpeedClass::Low);
    }

    #[test]
    fn ids_round_trip() {
        let mut seen = std::collections::BTreeSet::new();
        for (i, b) in OperatingBin::ALL.into_iter().enumerate() {
            assert_eq!(b.index(), i);
            assert_eq!(OperatingBin::from_id(b.id()), Some(b));
            assert_eq!(b.to_string().parse::<OperatingBin>().unwrap(), b);
            seen.insert(b.id());
        }
        assert_eq!(seen.len(), 22);
        assert!("Bin17".parse::<OperatingBin>().is_err());
        assert_eq!(SpeedRange::Medium.bins().count(), 8);
        assert_eq!(SpeedRange::Low.bins().count(), 6);
        assert_eq!(SpeedRange::High.bins().count(), 6);
    }

    #[test]
    fn classify_state_converts_units() {
        let p = VspParams::default();
        // 54 km/h = 15 m/s, a = 0.5 -> 9.9296 kW/ton -> Bin28
        let (bin, power) = classify_state(54.0, 0.5, &p).unwrap();
        assert_eq!(bin, OperatingBin::Bin28);
        assert!((power - 9.929625).abs() < 1e-9);
    }
}
