//! Per-voxel structural similarity between two volumes.
//!
//! Local statistics come from a windowed weighted average (Gaussian or
//! uniform, separable, edge-replicated); the SSIM formula then combines
//! luminance, contrast and structure per voxel. Values land in [-1, 1].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vol::{VolError, Volume};

#[derive(Error, Debug)]
pub enum SsimError {
    #[error("volume dims {0:?} and {1:?} differ")]
    DimMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("window side must be odd and positive, got {0}")]
    BadWindow(usize),
    #[error(transparent)]
    Vol(#[from] VolError),
}

/// Window weighting of the local statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsimWeighting {
    Gaussian { sigma: f64 },
    Uniform,
}

/// Windowed 3D SSIM or a per-axial-slice 2D fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsimMode {
    Volume,
    Slices,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub window_side: usize,
    pub weighting: SsimWeighting,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub mode: SsimMode,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_side: 11,
            weighting: SsimWeighting::Gaussian { sigma: 1.5 },
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            mode: SsimMode::Volume,
        }
    }
}

impl SsimParams {
    fn window_weights(&self) -> Result<Vec<f64>, SsimError> {
        let side = self.window_side;
        if side == 0 || side % 2 == 0 {
            return Err(SsimError::BadWindow(side));
        }
        let r = (side / 2) as isize;
        let mut w: Vec<f64> = match self.weighting {
            SsimWeighting::Gaussian { sigma } => (-r..=r)
                .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
                .collect(),
            SsimWeighting::Uniform => vec![1.0; side],
        };
        let total: f64 = w.iter().sum();
        for x in w.iter_mut() {
            *x /= total;
        }
        Ok(w)
    }
}

/// Weighted smoothing along one axis with edge replication.
/// `axis`: 0 = D, 1 = H, 2 = W.
fn smooth_axis(src: &[f64], dims: (usize, usize, usize), weights: &[f64], axis: usize) -> Vec<f64> {
    let (dd, hh, ww) = dims;
    let r = (weights.len() / 2) as isize;
    let extent = [dd, hh, ww][axis] as isize;
    let mut out = vec![0.0f64; src.len()];
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let coord = [d as isize, h as isize, w as isize];
                let mut acc = 0.0;
                for (t, &wt) in weights.iter().enumerate() {
                    let mut c = coord;
                    c[axis] = (coord[axis] + t as isize - r).clamp(0, extent - 1);
                    acc += wt * src[(c[0] as usize * hh + c[1] as usize) * ww + c[2] as usize];
                }
                out[(d * hh + h) * ww + w] = acc;
            }
        }
    }
    out
}

fn smooth(src: &[f64], dims: (usize, usize, usize), weights: &[f64], axes: &[usize]) -> Vec<f64> {
    let mut cur = src.to_vec();
    for &axis in axes {
        cur = smooth_axis(&cur, dims, weights, axis);
    }
    cur
}

/// Per-voxel SSIM map of two equally shaped volumes.
pub fn ssim_map(a: &Volume, b: &Volume, params: &SsimParams) -> Result<Volume, SsimError> {
    if a.dims() != b.dims() {
        return Err(SsimError::DimMismatch(a.dims(), b.dims()));
    }
    let weights = params.window_weights()?;
    let axes: &[usize] = match params.mode {
        SsimMode::Volume => &[0, 1, 2],
        SsimMode::Slices => &[1, 2],
    };
    let dims = a.dims();
    let av: Vec<f64> = a.voxels().iter().map(|&x| x as f64).collect();
    let bv: Vec<f64> = b.voxels().iter().map(|&x| x as f64).collect();
    let aa: Vec<f64> = av.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = bv.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
    let mu_a = smooth(&av, dims, &weights, axes);
    let mu_b = smooth(&bv, dims, &weights, axes);
    let m_aa = smooth(&aa, dims, &weights, axes);
    let m_bb = smooth(&bb, dims, &weights, axes);
    let m_ab = smooth(&ab, dims, &weights, axes);
    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let mut out = Vec::with_capacity(av.len());
    for i in 0..av.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        out.push(s.clamp(-1.0, 1.0) as f32);
    }
    Ok(Volume::new(dims, out)?)
}

/// Scalar mean SSIM over the map (used for appearance-alignment reporting).
pub fn mean_ssim(a: &Volume, b: &Volume, params: &SsimParams) -> Result<f64, SsimError> {
    Ok(ssim_map(a, b, params)?.mean())
}
