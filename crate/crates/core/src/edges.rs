//! Binary edge extraction from class maps.
//!
//! The default backend marks a voxel as edge when any of its six face
//! neighbors carries a different value, which on piecewise-constant class
//! maps is what classical Canny reduces to (up to thinning) and includes the
//! brain/background boundary. A volumetric Canny (gradient magnitude,
//! non-maximum suppression, hysteresis) is kept behind a flag for experiments
//! and for the intensity-edge ablation. Edge maps are consumed as constants:
//! no gradient flows back through them.

use serde::{Deserialize, Serialize};

use crate::vol::{MaskVolume, Volume};

/// Volume-shaped binary edge grid.
pub type EdgeMap = MaskVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeBackend {
    LabelBoundary,
    Canny3d,
}

impl Default for EdgeBackend {
    fn default() -> Self {
        EdgeBackend::LabelBoundary
    }
}

/// Extract a binary edge map from a (class-valued or intensity) volume.
pub fn extract_edges(map: &Volume, backend: EdgeBackend) -> EdgeMap {
    match backend {
        EdgeBackend::LabelBoundary => label_boundary(map),
        EdgeBackend::Canny3d => canny3d(map, 0.1, 0.2),
    }
}

/// Voxel is edge iff any 6-neighbor holds a different value.
pub fn label_boundary(map: &Volume) -> EdgeMap {
    let (dd, hh, ww) = map.dims();
    let mut out = MaskVolume::zeros(map.dims());
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let v = map.get(d, h, w);
                let differs = (d > 0 && map.get(d - 1, h, w) != v)
                    || (d + 1 < dd && map.get(d + 1, h, w) != v)
                    || (h > 0 && map.get(d, h - 1, w) != v)
                    || (h + 1 < hh && map.get(d, h + 1, w) != v)
                    || (w > 0 && map.get(d, h, w - 1) != v)
                    || (w + 1 < ww && map.get(d, h, w + 1) != v);
                if differs {
                    out.set(d, h, w, 1);
                }
            }
        }
    }
    out
}

/// Volumetric Canny: central-difference gradient, non-maximum suppression
/// along the quantized gradient direction, then hysteresis with thresholds
/// `low_frac` and `high_frac` of the maximum gradient magnitude.
pub fn canny3d(map: &Volume, low_frac: f32, high_frac: f32) -> EdgeMap {
    let (dd, hh, ww) = map.dims();
    let n = map.len();
    let clamp_get = |d: isize, h: isize, w: isize| -> f32 {
        map.get(
            d.clamp(0, dd as isize - 1) as usize,
            h.clamp(0, hh as isize - 1) as usize,
            w.clamp(0, ww as isize - 1) as usize,
        )
    };
    let mut grad = vec![(0.0f32, 0.0f32, 0.0f32); n];
    let mut mag = vec![0.0f32; n];
    let mut max_mag = 0.0f32;
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let (di, hi, wi) = (d as isize, h as isize, w as isize);
                let gd = (clamp_get(di + 1, hi, wi) - clamp_get(di - 1, hi, wi)) * 0.5;
                let gh = (clamp_get(di, hi + 1, wi) - clamp_get(di, hi - 1, wi)) * 0.5;
                let gw = (clamp_get(di, hi, wi + 1) - clamp_get(di, hi, wi - 1)) * 0.5;
                let m = (gd * gd + gh * gh + gw * gw).sqrt();
                let i = map.idx(d, h, w);
                grad[i] = (gd, gh, gw);
                mag[i] = m;
                max_mag = max_mag.max(m);
            }
        }
    }
    if max_mag == 0.0 {
        return MaskVolume::zeros(map.dims());
    }
    let quant = |x: f32, m: f32| -> isize {
        // component counts toward the step direction if it carries at least
        // half the magnitude of the dominant axis
        if x.abs() >= 0.5 * m {
            if x > 0.0 {
                1
            } else {
                -1
            }
        } else {
            0
        }
    };
    let mag_at = |d: isize, h: isize, w: isize| -> f32 {
        if d < 0 || h < 0 || w < 0 || d >= dd as isize || h >= hh as isize || w >= ww as isize {
            0.0
        } else {
            mag[(d as usize * hh + h as usize) * ww + w as usize]
        }
    };
    // non-maximum suppression along the gradient direction
    let mut nms = vec![0.0f32; n];
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let i = map.idx(d, h, w);
                let m = mag[i];
                if m == 0.0 {
                    continue;
                }
                let dominant = grad[i].0.abs().max(grad[i].1.abs()).max(grad[i].2.abs());
                let (sd, sh, sw) = (
                    quant(grad[i].0, dominant),
                    quant(grad[i].1, dominant),
                    quant(grad[i].2, dominant),
                );
                let (di, hi, wi) = (d as isize, h as isize, w as isize);
                let fw = mag_at(di + sd, hi + sh, wi + sw);
                let bw = mag_at(di - sd, hi - sh, wi - sw);
                if m >= fw && m > bw {
                    nms[i] = m;
                }
            }
        }
    }
    // hysteresis: strong seeds grow into connected weak responses
    let high = high_frac * max_mag;
    let low = low_frac * max_mag;
    let mut out = MaskVolume::zeros(map.dims());
    let mut stack: Vec<(usize, usize, usize)> = Vec::new();
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                if nms[map.idx(d, h, w)] >= high {
                    out.set(d, h, w, 1);
                    stack.push((d, h, w));
                }
            }
        }
    }
    while let Some((d, h, w)) = stack.pop() {
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (zd, zh, zw) = (d as isize + dz, h as isize + dy, w as isize + dx);
                    if zd < 0
                        || zh < 0
                        || zw < 0
                        || zd >= dd as isize
                        || zh >= hh as isize
                        || zw >= ww as isize
                    {
                        continue;
                    }
                    let (zd, zh, zw) = (zd as usize, zh as usize, zw as usize);
                    if out.get(zd, zh, zw) == 0 && nms[map.idx(zd, zh, zw)] >= low {
                        out.set(zd, zh, zw, 1);
                        stack.push((zd, zh, zw));
                    }
                }
            }
        }
    }
    out
}
