//! Directions of arrival and localisation error metrics.
//!
//! Directions use degrees: azimuth in [-180, 180] with positive values
//! to the left (+y), elevation in [-90, 90] with positive values up.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::foa::IntensityFrames;

#[derive(Debug, Error, PartialEq)]
pub enum DirectionError {
    #[error("azimuth {0} outside [-180, 180]")]
    AzimuthRange(f64),
    #[error("elevation {0} outside [-90, 90]")]
    ElevationRange(f64),
    #[error("direction component is not finite")]
    NonFinite,
}

/// A direction on the unit sphere, stored as degrees.
///
/// Serialises as `{azimuth_deg, elevation_deg}`; deserialisation
/// re-checks the ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DirectionWire", into = "DirectionWire")]
pub struct Direction {
    azimuth_deg: f64,
    elevation_deg: f64,
}

#[derive(Serialize, Deserialize)]
struct DirectionWire {
    azimuth_deg: f64,
    elevation_deg: f64,
}

impl TryFrom<DirectionWire> for Direction {
    type Error = DirectionError;

    fn try_from(w: DirectionWire) -> Result<Self, DirectionError> {
        Direction::new(w.azimuth_deg, w.elevation_deg)
    }
}

impl From<Direction> for DirectionWire {
    fn from(d: Direction) -> Self {
        Self { azimuth_deg: d.azimuth_deg, elevation_deg: d.elevation_deg }
    }
}

impl Direction {
    pub fn new(azimuth_deg: f64, elevation_deg: f64) -> Result<Self, DirectionError> {
        if !azimuth_deg.is_finite() || !elevation_deg.is_finite() {
            return Err(DirectionError::NonFinite);
        }
        if !(-180.0..=180.0).contains(&azimuth_deg) {
            return Err(DirectionError::AzimuthRange(azimuth_deg));
        }
        if !(-90.0..=90.0).contains(&elevation_deg) {
            return Err(DirectionError::ElevationRange(elevation_deg));
        }
        Ok(Self { azimuth_deg, elevation_deg })
    }

    pub fn azimuth_deg(&self) -> f64 {
        self.azimuth_deg
    }

    pub fn elevation_deg(&self) -> f64 {
        self.elevation_deg
    }

    /// Unit vector (x forward, y left, z up).
    pub fn unit_vector(&self) -> [f64; 3] {
        let (az, el) = (self.azimuth_deg.to_radians(), self.elevation_deg.to_radians());
        [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
    }

    /// Direction of a (not necessarily unit) vector.
    pub fn from_vector(v: [f64; 3]) -> Option<Self> {
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return None;
        }
        let azimuth_deg = v[1].atan2(v[0]).to_degrees();
        let elevation_deg = (v[2] / norm).clamp(-1.0, 1.0).asin().to_degrees();
        Some(Self { azimuth_deg, elevation_deg })
    }
}

/// Direction-of-arrival estimate from intensity frames: valid rows are
/// summed and the resultant converted to angles. `None` when no frame
/// is valid.
pub fn doa_from_iv(iv: &IntensityFrames) -> Option<Direction> {
    let mut sum = [0.0f64; 3];
    let mut any = false;
    for (row, ok) in iv.vectors.iter().zip(&iv.valid) {
        if *ok {
            any = true;
            for d in 0..3 {
                sum[d] += row[d];
            }
        }
    }
    if !any {
        return None;
    }
    Direction::from_vector(sum)
}

/// Absolute azimuth difference wrapped to [0, 180].
pub fn azimuth_error(truth: &Direction, estimate: &Direction) -> f64 {
    let diff = (truth.azimuth_deg - estimate.azimuth_deg).abs() % 360.0;
    diff.min(360.0 - diff)
}

/// Absolute elevation difference.
pub fn elevation_error(truth: &Direction, estimate: &Direction) -> f64 {
    (truth.elevation_deg - estimate.elevation_deg).abs()
}

/// Great-circle central angle between two directions, in degrees.
///
/// Computed as atan2(|u x v|, u . v), which stays accurate for nearly
/// identical and nearly antipodal directions alike.
pub fn angular_distance(a: &Direction, b: &Direction) -> f64 {
    let (u, v) = (a.unit_vector(), b.unit_vector());
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let cross_norm = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    cross_norm.atan2(dot).to_degrees()
}

/// Mean localisation errors over a batch of (truth, estimate) pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslErrors {
    pub azimuth_mae: f64,
    pub elevation_mae: f64,
    pub angular_mae: f64,
    pub count: usize,
}

/// Aggregate per-pair errors into means. `None` for an empty batch.
pub fn aggregate_ssl(pairs: &[(Direction, Direction)]) -> Option<SslErrors> {
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let mut az = 0.0;
    let mut el = 0.0;
    let mut ang = 0.0;
    for (truth, est) in pairs {
        az += azimuth_error(truth, est);
        el += elevation_error(truth, est);
        ang += angular_distance(truth, est);
    }
    Some(SslErrors {
        azimuth_mae: az / n,
        elevation_mae: el / n,
        angular_mae: ang / n,
        count: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_validation() {
        assert!(Direction::new(180.0, 90.0).is_ok());
        assert!(Direction::new(-180.0, -90.0).is_ok());
        assert_eq!(
            Direction::new(180.5, 0.0).unwrap_err(),
            DirectionError::AzimuthRange(180.5)
        );
        assert_eq!(
            Direction::new(0.0, 91.0).unwrap_err(),
            DirectionError::ElevationRange(91.0)
        );
        assert_eq!(Direction::new(f64::NAN, 0.0).unwrap_err(), DirectionError::NonFinite);
    }

    #[test]
    fn vector_roundtrip() {
        for &(az, el) in &[(0.0, 0.0), (90.0, 0.0), (-135.0, 45.0), (179.0, -89.0)] {
            let d = Direction::new(az, el).unwrap();
            let back = Direction::from_vector(d.unit_vector()).unwrap();
            assert!(azimuth_error(&d, &back) < 1e-9, "az {az}");
            assert!(elevation_error(&d, &back) < 1e-9, "el {el}");
        }
        assert!(Direction::from_vector([0.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn azimuth_wraps_at_180() {
        let a = Direction::new(179.0, 0.0).unwrap();
        let b = Direction::new(-179.0, 0.0).unwrap();
        assert!((azimuth_error(&a, &b) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn angular_distance_cases() {
        let front = Direction::new(0.0, 0.0).unwrap();
        let left = Direction::new(90.0, 0.0).unwrap();
        let up = Direction::new(0.0, 90.0).unwrap();
        assert!((angular_distance(&front, &left) - 90.0).abs() < 1e-9);
        assert!((angular_distance(&front, &up) - 90.0).abs() < 1e-9);
        assert!(angular_distance(&front, &front) < 1e-9);
        let back = Direction::new(180.0, 0.0).unwrap();
        assert!((angular_distance(&front, &back) - 180.0).abs() < 1e-9);
    }

    #[test]
    fn doa_averages_valid_rows_only() {
        let iv = IntensityFrames {
            vectors: vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
            valid: vec![true, true, false],
            frame_rate: 50.0,
        };
        let d = doa_from_iv(&iv).unwrap();
        assert!((d.azimuth_deg() - 45.0).abs() < 1e-9);
        assert!(d.elevation_deg().abs() < 1e-9);

        let none = IntensityFrames {
            vectors: vec![[0.0; 3]; 3],
            valid: vec![false; 3],
            frame_rate: 50.0,
        };
        assert!(doa_from_iv(&none).is_none());
    }

    #[test]
    fn aggregate_means() {
        let t0 = Direction::new(0.0, 0.0).unwrap();
        let t1 = Direction::new(90.0, 10.0).unwrap();
        let e0 = Direction::new(10.0, 0.0).unwrap();
        let e1 = Direction::new(90.0, 30.0).unwrap();
        let errs = aggregate_ssl(&[(t0, e0), (t1, e1)]).unwrap();
        assert!((errs.azimuth_mae - 5.0).abs() < 1e-12);
        assert!((errs.elevation_mae - 10.0).abs() < 1e-12);
        assert_eq!(errs.count, 2);
        assert!(aggregate_ssl(&[]).is_none());
    }
}
