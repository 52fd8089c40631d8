use serde::{Deserialize, Serialize};

use super::{IngestError, Trip};
use crate::binning::kmh_to_ms;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelEstimate {
    /// m/s²
    pub accel: f64,
    /// Set when the estimate spans a data gap or could not be computed.
    pub low_confidence: bool,
}

/// Produces one acceleration estimate per record of an accepted trip.
pub trait AccelerationEstimator: Send + Sync {
    fn name(&self) -> &'static str;

    fn estimate(&self, trip: &Trip) -> Result<Vec<AccelEstimate>, IngestError>;
}

/// Gap-aware finite differences over the actual timestamp deltas: central at
/// interior records, one-sided at the ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteDifference {
    /// Intervals longer than this mark the adjacent estimates low-confidence.
    pub max_interval_s: i64,
}

impl Default for FiniteDifference {
    fn default() -> Self {
        Self { max_interval_s: 12 }
    }
}

impl AccelerationEstimator for FiniteDifference {
    fn name(&self) -> &'static str {
        "finite-difference"
    }

    fn estimate(&self, trip: &Trip) -> Result<Vec<AccelEstimate>, IngestError> {
        let recs = &trip.records;
        let n = recs.len();
        if n < 3 {
            return Err(IngestError::DegenerateTrip(n));
        }
        let slope = |i: usize, j: usize| {
            let dt = (recs[j].timestamp - recs[i].timestamp) as f64;
            (kmh_to_ms(recs[j].speed) - kmh_to_ms(recs[i].speed)) / dt
        };
        let gap = |i: usize| recs[i + 1].timestamp - recs[i].timestamp > self.max_interval_s;

        Ok((0..n)
            .map(|i| {
                let (lo, hi) = match i {
                    0 => (0, 1),
                    _ if i == n - 1 => (n - 2, n - 1),
                    _ => (i - 1, i + 1),
                };
                let spans_gap = (i > 0 && gap(i - 1)) || (i + 1 < n && gap(i));
                let a = slope(lo, hi);
                if a.is_finite() {
                    AccelEstimate {
                        accel: a,
                        low_confidence: spans_gap,
                    }
                } else {
                    AccelEstimate {
                        accel: 0.0,
                        low_confidence: true,
                    }
                }
            })
            .collect())
    }
}

/// Convenience wrapper around the default [`FiniteDifference`] estimator.
pub fn estimate_acceleration(trip: &Trip) -> Result<Vec<AccelEstimate>, IngestError> {
    FiniteDifference::default().estimate(trip)
}
