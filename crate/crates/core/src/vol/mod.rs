//! Dense 3D volume and mask containers with the morphological and smoothing
//! filters used across the pipeline.
//!
//! Voxels are stored row-major with W fastest: `idx = (d * H + h) * W + w`.
//! Min/mean filters replicate edge voxels at the boundary; binary erosion
//! zero-pads, so an all-ones mask shrinks at the border.

pub mod io;

use thiserror::Error;

/// Errors from volume construction, filtering and I/O.
#[derive(Error, Debug)]
pub enum VolError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload mismatch: header promises {expected} voxels, file holds {actual}")]
    PayloadMismatch { expected: usize, actual: usize },
    #[error("non-finite voxel at index {0}")]
    NonFinite(usize),
    #[error("kernel side must be odd, got {0}")]
    EvenKernel(usize),
    #[error("kernel mode {got} where {want} expected")]
    KernelMode { got: &'static str, want: &'static str },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("dims ({0}, {1}, {2}) not divisible by factor {3}")]
    NotDivisible(usize, usize, usize, usize),
    #[error("slice index {index} out of range for axis of extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("mask voxel at index {0} is {1}, expected 0 or 1")]
    NotBinary(usize, f32),
}

/// Dense 3D scalar grid, dims `(D, H, W)`, W fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    voxels: Vec<f32>,
}

impl Volume {
    /// Build a volume from raw voxels; rejects non-finite values and size mismatch.
    pub fn new(dims: (usize, usize, usize), voxels: Vec<f32>) -> Result<Self, VolError> {
        let n = dims.0 * dims.1 * dims.2;
        if voxels.len() != n {
            return Err(VolError::DimMismatch(format!(
                "dims {:?} imply {} voxels, got {}",
                dims,
                n,
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(VolError::NonFinite(i));
        }
        Ok(Self { dims, voxels })
    }

    /// Constant-valued volume.
    pub fn constant(dims: (usize, usize, usize), value: f32) -> Self {
        Self { dims, voxels: vec![value; dims.0 * dims.1 * dims.2] }
    }

    /// Build voxel-by-voxel from `(d, h, w)`.
    pub fn from_fn(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let (dd, hh, ww) = dims;
        let mut voxels = Vec::with_capacity(dd * hh * ww);
        for d in 0..dd {
            for h in 0..hh {
                for w in 0..ww {
                    voxels.push(f(d, h, w));
                }
            }
        }
        Self { dims, voxels }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn idx(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims.1 + h) * self.dims.2 + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.voxels[self.idx(d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, v: f32) {
        let i = self.idx(d, h, w);
        self.voxels[i] = v;
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    /// Elementwise map; caller keeps values finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { dims: self.dims, voxels: self.voxels.iter().map(|&v| f(v)).collect() }
    }

    pub fn min(&self) -> f32 {
        self.voxels.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.voxels.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        if self.voxels.is_empty() {
            return 0.0;
        }
        self.voxels.iter().map(|&v| v as f64).sum::<f64>() / self.voxels.len() as f64
    }
}

/// Binary {0,1} volume, same layout as [`Volume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    dims: (usize, usize, usize),
    voxels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: (usize, usize, usize), voxels: Vec<u8>) -> Result<Self, VolError> {
        let n = dims.0 * dims.1 * dims.2;
        if voxels.len() != n {
            return Err(VolError::DimMismatch(format!(
                "dims {:?} imply {} voxels, got {}",
                dims,
                n,
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|&v| v > 1) {
            return Err(VolError::NotBinary(i, voxels[i] as f32));
        }
        Ok(Self { dims, voxels })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Self { dims, voxels: vec![0; dims.0 * dims.1 * dims.2] }
    }

    pub fn ones(dims: (usize, usize, usize)) -> Self {
        Self { dims, voxels: vec![1; dims.0 * dims.1 * dims.2] }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn idx(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims.1 + h) * self.dims.2 + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> u8 {
        self.voxels[self.idx(d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, v: u8) {
        let i = self.idx(d, h, w);
        self.voxels[i] = v;
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    /// Number of set voxels.
    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1).count()
    }

    /// View as a {0.0, 1.0} volume.
    pub fn to_volume(&self) -> Volume {
        Volume { dims: self.dims, voxels: self.voxels.iter().map(|&v| v as f32).collect() }
    }

    /// Parse a {0,1}-valued volume into a mask.
    pub fn from_volume(v: &Volume) -> Result<Self, VolError> {
        let mut voxels = Vec::with_capacity(v.len());
        for (i, &x) in v.voxels().iter().enumerate() {
            if x == 0.0 {
                voxels.push(0);
            } else if x == 1.0 {
                voxels.push(1);
            } else {
                return Err(VolError::NotBinary(i, x));
            }
        }
        Ok(Self { dims: v.dims, voxels })
    }
}

/// Cubic filter window: odd side `k` (0 disables the filter) and a mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSpec {
    pub side: usize,
    pub mode: KernelMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    Minimum,
    Mean,
    Erosion,
}

impl KernelSpec {
    pub fn minimum(side: usize) -> Self {
        Self { side, mode: KernelMode::Minimum }
    }

    pub fn mean(side: usize) -> Self {
        Self { side, mode: KernelMode::Mean }
    }

    pub fn erosion(side: usize) -> Self {
        Self { side, mode: KernelMode::Erosion }
    }

    fn check(&self, want: KernelMode, name: &'static str) -> Result<(), VolError> {
        if self.mode != want {
            return Err(VolError::KernelMode { got: self.mode.name(), want: name });
        }
        if self.side != 0 && self.side % 2 == 0 {
            return Err(VolError::EvenKernel(self.side));
        }
        Ok(())
    }
}

impl KernelMode {
    fn name(&self) -> &'static str {
        match self {
            KernelMode::Minimum => "minimum",
            KernelMode::Mean => "mean",
            KernelMode::Erosion => "erosion",
        }
    }
}

/// Foreground mask `x > 0` of a preprocessed volume (background is exactly 0).
pub fn brain_mask(x: &Volume) -> MaskVolume {
    MaskVolume {
        dims: x.dims,
        voxels: x.voxels.iter().map(|&v| u8::from(v > 0.0)).collect(),
    }
}

/// Binary erosion with a cubic window, zero-padded outside bounds.
///
/// Output is 1 iff every voxel of the k^3 neighborhood is 1, so set voxels on
/// the volume boundary are always cleared. `side = 0` returns the input.
pub fn erode_mask(m: &MaskVolume, k: &KernelSpec) -> Result<MaskVolume, VolError> {
    k.check(KernelMode::Erosion, "erosion")?;
    if k.side == 0 {
        return Ok(m.clone());
    }
    let (dd, hh, ww) = m.dims;
    let r = (k.side / 2) as isize;
    let mut out = MaskVolume::zeros(m.dims);
    for d in 0..dd as isize {
        for h in 0..hh as isize {
            'voxel: for w in 0..ww as isize {
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (zd, zh, zw) = (d + dz, h + dy, w + dx);
                            let inside = zd >= 0
                                && zh >= 0
                                && zw >= 0
                                && zd < dd as isize
                                && zh < hh as isize
                                && zw < ww as isize;
                            if !inside || m.get(zd as usize, zh as usize, zw as usize) == 0 {
                                continue 'voxel;
                            }
                        }
                    }
                }
                out.set(d as usize, h as usize, w as usize, 1);
            }
        }
    }
    Ok(out)
}

#[inline]
fn clamp_i(x: isize, hi: usize) -> usize {
    x.clamp(0, hi as isize - 1) as usize
}

/// Minimum filter with edge replication; `side = 0` is the identity.
pub fn min_filter(v: &Volume, k: &KernelSpec) -> Result<Volume, VolError> {
    k.check(KernelMode::Minimum, "minimum")?;
    if k.side == 0 {
        return Ok(v.clone());
    }
    let (dd, hh, ww) = v.dims;
    let r = (k.side / 2) as isize;
    let mut out = Volume::constant(v.dims, 0.0);
    for d in 0..dd as isize {
        for h in 0..hh as isize {
            for w in 0..ww as isize {
                let mut m = f32::INFINITY;
                for dz in -r..=r {
                    let zd = clamp_i(d + dz, dd);
                    for dy in -r..=r {
                        let zh = clamp_i(h + dy, hh);
                        for dx in -r..=r {
                            let zw = clamp_i(w + dx, ww);
                            m = m.min(v.get(zd, zh, zw));
                        }
                    }
                }
                out.set(d as usize, h as usize, w as usize, m);
            }
        }
    }
    Ok(out)
}

/// Mean filter with edge replication; `side = 0` is the identity.
pub fn mean_filter(v: &Volume, k: &KernelSpec) -> Result<Volume, VolError> {
    k.check(KernelMode::Mean, "mean")?;
    if k.side == 0 {
        return Ok(v.clone());
    }
    let (dd, hh, ww) = v.dims;
    let r = (k.side / 2) as isize;
    let inv = 1.0 / (k.side * k.side * k.side) as f64;
    let mut out = Volume::constant(v.dims, 0.0);
    for d in 0..dd as isize {
        for h in 0..hh as isize {
            for w in 0..ww as isize {
                let mut acc = 0.0f64;
                for dz in -r..=r {
                    let zd = clamp_i(d + dz, dd);
                    for dy in -r..=r {
                        let zh = clamp_i(h + dy, hh);
                        for dx in -r..=r {
                            let zw = clamp_i(w + dx, ww);
                            acc += v.get(zd, zh, zw) as f64;
                        }
                    }
                }
                out.set(d as usize, h as usize, w as usize, (acc * inv) as f32);
            }
        }
    }
    Ok(out)
}

/// Integer-factor downsampling by trilinear interpolation at output cell centers.
///
/// Output dims are `dims / factor`; each output voxel samples the input at
/// `o * factor + (factor - 1) / 2` per axis, so `factor = 1` is the identity
/// and `factor = 2` averages each 2x2x2 block.
pub fn downsample_trilinear(v: &Volume, factor: usize) -> Result<Volume, VolError> {
    let (dd, hh, ww) = v.dims;
    if factor == 0 || dd % factor != 0 || hh % factor != 0 || ww % factor != 0 {
        return Err(VolError::NotDivisible(dd, hh, ww, factor));
    }
    if factor == 1 {
        return Ok(v.clone());
    }
    let (od, oh, ow) = (dd / factor, hh / factor, ww / factor);
    let half = (factor - 1) as f64 * 0.5;
    let sample_axis = |o: usize| -> (usize, usize, f64) {
        let p = (o * factor) as f64 + half;
        let i0 = p.floor() as usize;
        (i0, i0 + 1, p - i0 as f64)
    };
    let mut out = Volume::constant((od, oh, ow), 0.0);
    for d in 0..od {
        let (d0, d1, fd) = sample_axis(d);
        for h in 0..oh {
            let (h0, h1, fh) = sample_axis(h);
            for w in 0..ow {
                let (w0, w1, fw) = sample_axis(w);
                let mut acc = 0.0f64;
                for (zd, wz) in [(d0, 1.0 - fd), (d1, fd)] {
                    for (zh, wy) in [(h0, 1.0 - fh), (h1, fh)] {
                        for (zw, wx) in [(w0, 1.0 - fw), (w1, fw)] {
                            acc += v.get(zd.min(dd - 1), zh.min(hh - 1), zw.min(ww - 1)) as f64
                                * wz
                                * wy
                                * wx;
                        }
                    }
                }
                out.set(d, h, w, acc as f32);
            }
        }
    }
    Ok(out)
}

/// Anatomical slicing axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceAxis {
    /// Fixed D index, H x W plane.
    Axial,
    /// Fixed H index, D x W plane.
    Coronal,
    /// Fixed W index, D x H plane.
    Sagittal,
}

impl SliceAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "axial" => Some(SliceAxis::Axial),
            "coronal" => Some(SliceAxis::Coronal),
            "sagittal" => Some(SliceAxis::Sagittal),
            _ => None,
        }
    }
}

/// Extract a 2D slice as `(height, width, values)` in row-major order.
pub fn slice_values(
    v: &Volume,
    axis: SliceAxis,
    index: usize,
) -> Result<(usize, usize, Vec<f32>), VolError> {
    let (dd, hh, ww) = v.dims;
    let (extent, rows, cols) = match axis {
        SliceAxis::Axial => (dd, hh, ww),
        SliceAxis::Coronal => (hh, dd, ww),
        SliceAxis::Sagittal => (ww, dd, hh),
    };
    if index >= extent {
        return Err(VolError::IndexOutOfRange { index, extent });
    }
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let val = match axis {
                SliceAxis::Axial => v.get(index, r, c),
                SliceAxis::Coronal => v.get(r, index, c),
                SliceAxis::Sagittal => v.get(r, c, index),
            };
            values.push(val);
        }
    }
    Ok((rows, cols, values))
}
