//! Intensity standardization: piecewise-linear histogram matching against a
//! landmark profile (decile landmarks plus the 1st and 99th percentiles,
//! nearest-rank estimator) and fixed-value scaling with clipping to [0, 1].
//! Background voxels (exactly 0) pass through untouched.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vol::Volume;

#[derive(Error, Debug)]
pub enum PrepError {
    #[error("no volumes given")]
    EmptySet,
    #[error("volume has no foreground voxels")]
    EmptyMask,
    #[error("degenerate volume: {0}")]
    Degenerate(String),
    #[error("landmarks must increase strictly: {0}")]
    NonMonotonic(String),
    #[error("scale must be positive, got {0}")]
    BadScale(f32),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed profile: {0}")]
    Malformed(String),
}

/// Default landmark percentiles: 1, 10, 20, ..., 90, 99.
pub fn default_percentiles() -> Vec<f64> {
    let mut p = vec![1.0];
    p.extend((1..=9).map(|i| i as f64 * 10.0));
    p.push(99.0);
    p
}

/// Reference intensity landmarks at fixed percentile positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkProfile {
    pub percentiles: Vec<f64>,
    pub values: Vec<f64>,
}

impl LandmarkProfile {
    pub fn validate(&self) -> Result<(), PrepError> {
        if self.percentiles.len() != self.values.len() || self.percentiles.len() < 2 {
            return Err(PrepError::Malformed(format!(
                "{} percentiles vs {} values",
                self.percentiles.len(),
                self.values.len()
            )));
        }
        for w in self.percentiles.windows(2) {
            if w[1] <= w[0] {
                return Err(PrepError::NonMonotonic(format!("percentiles {} then {}", w[0], w[1])));
            }
        }
        for w in self.values.windows(2) {
            if w[1] <= w[0] {
                return Err(PrepError::NonMonotonic(format!("values {} then {}", w[0], w[1])));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PrepError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| PrepError::Malformed(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PrepError> {
        let text = std::fs::read_to_string(path)?;
        let profile: LandmarkProfile =
            serde_json::from_str(&text).map_err(|e| PrepError::Malformed(e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }
}

/// Nearest-rank percentile over a sorted slice.
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Foreground intensities of a volume: in-mask (v > 0) when `mask_aware`,
/// every voxel otherwise.
fn foreground(v: &Volume, mask_aware: bool) -> Vec<f64> {
    v.voxels()
        .iter()
        .filter(|&&x| !mask_aware || x > 0.0)
        .map(|&x| x as f64)
        .collect()
}

fn landmarks_of(v: &Volume, percentiles: &[f64], mask_aware: bool) -> Result<Vec<f64>, PrepError> {
    let mut fg = foreground(v, mask_aware);
    if fg.is_empty() {
        return Err(PrepError::EmptyMask);
    }
    fg.sort_by(|a, b| a.partial_cmp(b).expect("finite voxels"));
    Ok(percentiles.iter().map(|&p| percentile_sorted(&fg, p)).collect())
}

/// Average the per-volume percentile landmarks into a reference profile.
pub fn compute_landmarks(
    volumes: &[Volume],
    percentiles: &[f64],
    mask_aware: bool,
) -> Result<LandmarkProfile, PrepError> {
    if volumes.is_empty() {
        return Err(PrepError::EmptySet);
    }
    let mut acc = vec![0.0f64; percentiles.len()];
    for v in volumes {
        for (a, l) in acc.iter_mut().zip(landmarks_of(v, percentiles, mask_aware)?) {
            *a += l;
        }
    }
    for a in acc.iter_mut() {
        *a /= volumes.len() as f64;
    }
    let profile = LandmarkProfile { percentiles: percentiles.to_vec(), values: acc };
    profile.validate()?;
    Ok(profile)
}

/// Map foreground intensities by the piecewise-linear function taking the
/// volume's own landmarks onto the profile's; linear extrapolation beyond the
/// end landmarks, background stays 0, output clipped to [0, 1].
pub fn match_histogram(v: &Volume, profile: &LandmarkProfile) -> Result<Volume, PrepError> {
    profile.validate()?;
    let own = landmarks_of(v, &profile.percentiles, true)?;
    for w in own.windows(2) {
        if w[1] <= w[0] {
            return Err(PrepError::Degenerate(format!(
                "volume landmarks not strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
    }
    let target = &profile.values;
    let n = own.len();
    let map = |x: f64| -> f64 {
        // segment index: last k with own[k] <= x, clamped to end segments
        let k = match own.iter().position(|&l| x < l) {
            Some(0) => 0,
            Some(k) => k - 1,
            None => n - 2,
        };
        let k = k.min(n - 2);
        let t = (x - own[k]) / (own[k + 1] - own[k]);
        target[k] + t * (target[k + 1] - target[k])
    };
    let out: Vec<f32> = v
        .voxels()
        .iter()
        .map(|&x| {
            if x == 0.0 {
                0.0
            } else {
                map(x as f64).clamp(0.0, 1.0) as f32
            }
        })
        .collect();
    Ok(Volume::new(v.dims(), out).expect("clamped values are finite"))
}

/// Multiply by a fixed scale, then clip into [0, 1].
pub fn clip_scale(v: &Volume, scale: f32) -> Result<Volume, PrepError> {
    if !(scale > 0.0) {
        return Err(PrepError::BadScale(scale));
    }
    Ok(v.map(|x| (x * scale).clamp(0.0, 1.0)))
}
