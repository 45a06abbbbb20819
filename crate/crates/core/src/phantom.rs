//! Synthetic paired-modality 3D phantoms with lesion ground truth.
//!
//! A subject is an ellipsoidal "brain" whose interior is partitioned into
//! three tissue classes by thresholding a smoothed random field at its
//! 33rd/66th percentiles. Each modality renders the same class geometry with
//! its own intensity table (inverted contrast between the two defaults), a
//! multiplicative smooth bias field and additive Gaussian noise. Lesions are
//! ellipsoidal intensity offsets recorded in a truth mask; geometry is never
//! deformed.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{DatasetManifest, Role, SubjectEntry};
use crate::vol::{io::save_mask, io::save_volume, mean_filter, KernelSpec, MaskVolume, VolError, Volume};

#[derive(Error, Debug)]
pub enum PhantomError {
    #[error("dims {0:?} too small, need at least 16 per axis")]
    DimsTooSmall((usize, usize, usize)),
    #[error("invalid phantom spec: {0}")]
    BadSpec(String),
    #[error("lesion exits the brain mask")]
    LesionOutsideBrain,
    #[error("could not place a lesion inside the brain after {0} tries")]
    PlacementFailed(usize),
    #[error(transparent)]
    Vol(#[from] VolError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// Generation parameters of one synthetic cohort.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Per-modality class intensity tables (class 1..C); the two defaults
    /// invert contrast ordering like T1/T2 do.
    pub class_intensities: Vec<Vec<f32>>,
    /// Kernel side of the three smoothing passes shaping the class field.
    pub smooth_kernel: usize,
    /// Additive Gaussian noise level.
    pub noise_sigma: f32,
    /// Amplitude of the multiplicative smooth bias field.
    pub bias_amplitude: f32,
    /// Brain semi-axes as a fraction of each extent.
    pub brain_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [24, 24, 24],
            class_intensities: vec![vec![0.25, 0.55, 0.85], vec![0.85, 0.5, 0.3]],
            smooth_kernel: 5,
            noise_sigma: 0.02,
            bias_amplitude: 0.1,
            brain_fraction: 0.42,
        }
    }
}

impl PhantomSpec {
    pub fn dims_tuple(&self) -> (usize, usize, usize) {
        (self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn modality_count(&self) -> usize {
        self.class_intensities.len()
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(PhantomError::DimsTooSmall(self.dims_tuple()));
        }
        if self.class_intensities.is_empty() {
            return Err(PhantomError::BadSpec("need at least one modality table".into()));
        }
        let classes = self.class_intensities[0].len();
        for (m, table) in self.class_intensities.iter().enumerate() {
            if table.len() != classes {
                return Err(PhantomError::BadSpec(format!(
                    "modality {m} has {} classes, expected {classes}",
                    table.len()
                )));
            }
            for (i, &v) in table.iter().enumerate() {
                if !(0.0 < v && v < 1.0) {
                    return Err(PhantomError::BadSpec(format!(
                        "modality {m} class {i} intensity {v} outside (0,1)"
                    )));
                }
                if table[..i].iter().any(|&u| u == v) {
                    return Err(PhantomError::BadSpec(format!(
                        "modality {m} has duplicate intensity {v}"
                    )));
                }
            }
        }
        if self.smooth_kernel % 2 == 0 {
            return Err(PhantomError::BadSpec("smooth_kernel must be odd".into()));
        }
        Ok(())
    }
}

/// One concrete ellipsoidal lesion.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LesionSpec {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Additive intensity offset per modality.
    pub offsets: Vec<f32>,
    /// Extra intra-lesion noise; 0 disables.
    pub texture_sigma: f32,
}

/// How dataset generation samples lesions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LesionConfig {
    pub radius_range: [f64; 2],
    pub offsets: Vec<f32>,
    pub texture_sigma: f32,
}

impl Default for LesionConfig {
    fn default() -> Self {
        Self { radius_range: [2.5, 4.5], offsets: vec![0.3, 0.3], texture_sigma: 0.0 }
    }
}

/// Tissue labels: 0 background, 1..=C inside the brain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: (usize, usize, usize),
    voxels: Vec<u8>,
}

impl LabelVolume {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> u8 {
        self.voxels[(d * self.dims.1 + h) * self.dims.2 + w]
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }
}

fn ellipsoid_mask(dims: (usize, usize, usize), fraction: f64) -> MaskVolume {
    let (dd, hh, ww) = dims;
    let center = ((dd - 1) as f64 / 2.0, (hh - 1) as f64 / 2.0, (ww - 1) as f64 / 2.0);
    let radii = (fraction * dd as f64, fraction * hh as f64, fraction * ww as f64);
    let mut m = MaskVolume::zeros(dims);
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let zd = (d as f64 - center.0) / radii.0;
                let zh = (h as f64 - center.1) / radii.1;
                let zw = (w as f64 - center.2) / radii.2;
                if zd * zd + zh * zh + zw * zw <= 1.0 {
                    m.set(d, h, w, 1);
                }
            }
        }
    }
    m
}

/// Smoothed white noise in [0,1]: three mean-filter passes over uniforms.
fn smooth_field(dims: (usize, usize, usize), kernel: usize, rng: &mut ChaCha8Rng) -> Volume {
    let noise = Volume::from_fn(dims, |_, _, _| rng.gen::<f32>());
    let k = KernelSpec::mean(kernel);
    let mut field = noise;
    for _ in 0..3 {
        field = mean_filter(&field, &k).expect("odd kernel");
    }
    field
}

/// Nearest-rank percentile of a sorted slice.
fn percentile_sorted(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Ellipsoidal brain mask plus a three-class partition of its interior,
/// deterministic per rng state.
pub fn generate_anatomy(
    spec: &PhantomSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(LabelVolume, MaskVolume), PhantomError> {
    spec.validate()?;
    let dims = spec.dims_tuple();
    let mask = ellipsoid_mask(dims, spec.brain_fraction);
    let field = smooth_field(dims, spec.smooth_kernel, rng);
    let mut in_mask: Vec<f32> = field
        .voxels()
        .iter()
        .zip(mask.voxels().iter())
        .filter(|(_, &m)| m == 1)
        .map(|(&v, _)| v)
        .collect();
    in_mask.sort_by(|a, b| a.partial_cmp(b).expect("finite field"));
    let t1 = percentile_sorted(&in_mask, 33.0);
    let t2 = percentile_sorted(&in_mask, 66.0);
    let voxels: Vec<u8> = field
        .voxels()
        .iter()
        .zip(mask.voxels().iter())
        .map(|(&v, &m)| {
            if m == 0 {
                0
            } else if v <= t1 {
                1
            } else if v <= t2 {
                2
            } else {
                3
            }
        })
        .collect();
    Ok((LabelVolume { dims, voxels }, mask))
}

/// Floor for in-brain intensities so thresholding at zero always recovers
/// the generation mask.
const IN_BRAIN_FLOOR: f32 = 1e-3;

/// Render one modality of a labeled subject: class-intensity lookup, smooth
/// multiplicative bias, additive noise, clipped into (0, 1] inside the brain
/// and exactly 0 outside.
pub fn render_modality(
    labels: &LabelVolume,
    mask: &MaskVolume,
    spec: &PhantomSpec,
    modality: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Volume, PhantomError> {
    let table = spec
        .class_intensities
        .get(modality)
        .ok_or_else(|| PhantomError::BadSpec(format!("modality {modality} out of range")))?;
    let dims = labels.dims();
    let bias = smooth_field(dims, spec.smooth_kernel, rng);
    // center the bias field around zero before scaling by the amplitude
    let (blo, bhi) = (bias.min(), bias.max());
    let bspan = if bhi > blo { (bhi - blo) / 2.0 } else { 1.0 };
    let bmid = (bhi + blo) / 2.0;
    let noise = Normal::new(0.0f64, spec.noise_sigma as f64)
        .map_err(|e| PhantomError::BadSpec(e.to_string()))?;
    let mut out = Volume::constant(dims, 0.0);
    let (dd, hh, ww) = dims;
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                if mask.get(d, h, w) == 0 {
                    continue;
                }
                let class = labels.get(d, h, w) as usize;
                let base = table[class - 1];
                let b = (bias.get(d, h, w) - bmid) / bspan; // in [-1, 1]
                let n = noise.sample(rng) as f32;
                let v = base * (1.0 + spec.bias_amplitude * b) + n;
                out.set(d, h, w, v.clamp(IN_BRAIN_FLOOR, 1.0));
            }
        }
    }
    Ok(out)
}

/// Rasterize the lesion ellipsoid into a mask.
fn lesion_mask(dims: (usize, usize, usize), lesion: &LesionSpec) -> MaskVolume {
    let mut m = MaskVolume::zeros(dims);
    let (dd, hh, ww) = dims;
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let zd = (d as f64 - lesion.center[0]) / lesion.radii[0];
                let zh = (h as f64 - lesion.center[1]) / lesion.radii[1];
                let zw = (w as f64 - lesion.center[2]) / lesion.radii[2];
                if zd * zd + zh * zh + zw * zw <= 1.0 {
                    m.set(d, h, w, 1);
                }
            }
        }
    }
    m
}

/// Offset the lesion region in every modality and return the truth mask.
/// The lesion must lie entirely inside the brain mask.
pub fn inject_lesion(
    volumes: &mut [Volume],
    brain: &MaskVolume,
    lesion: &LesionSpec,
    rng: &mut ChaCha8Rng,
) -> Result<MaskVolume, PhantomError> {
    let dims = brain.dims();
    let truth = lesion_mask(dims, lesion);
    for i in 0..truth.len() {
        if truth.voxels()[i] == 1 && brain.voxels()[i] == 0 {
            return Err(PhantomError::LesionOutsideBrain);
        }
    }
    if volumes.len() != lesion.offsets.len() {
        return Err(PhantomError::BadSpec(format!(
            "{} offsets for {} modalities",
            lesion.offsets.len(),
            volumes.len()
        )));
    }
    let texture = if lesion.texture_sigma > 0.0 {
        Some(Normal::new(0.0f64, lesion.texture_sigma as f64).map_err(|e| PhantomError::BadSpec(e.to_string()))?)
    } else {
        None
    };
    for (v, &offset) in volumes.iter_mut().zip(lesion.offsets.iter()) {
        for i in 0..truth.len() {
            if truth.voxels()[i] == 1 {
                let t = texture.map_or(0.0, |n| n.sample(rng) as f32);
                let x = v.voxels()[i] + offset + t;
                v.voxels_mut()[i] = x.clamp(IN_BRAIN_FLOOR, 1.0);
            }
        }
    }
    Ok(truth)
}

/// Sample a lesion that fits inside the brain; deterministic per rng state.
pub fn sample_lesion(
    brain: &MaskVolume,
    cfg: &LesionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LesionSpec, PhantomError> {
    let (dd, hh, ww) = brain.dims();
    const TRIES: usize = 64;
    for _ in 0..TRIES {
        let radii = [
            rng.gen_range(cfg.radius_range[0]..=cfg.radius_range[1]),
            rng.gen_range(cfg.radius_range[0]..=cfg.radius_range[1]),
            rng.gen_range(cfg.radius_range[0]..=cfg.radius_range[1]),
        ];
        let center = [
            rng.gen_range(0.25 * dd as f64..0.75 * dd as f64),
            rng.gen_range(0.25 * hh as f64..0.75 * hh as f64),
            rng.gen_range(0.25 * ww as f64..0.75 * ww as f64),
        ];
        let candidate = LesionSpec {
            center,
            radii,
            offsets: cfg.offsets.clone(),
            texture_sigma: cfg.texture_sigma,
        };
        let m = lesion_mask(brain.dims(), &candidate);
        if m.count() > 0
            && m.voxels().iter().zip(brain.voxels().iter()).all(|(&l, &b)| l == 0 || b == 1)
        {
            return Ok(candidate);
        }
    }
    Err(PhantomError::PlacementFailed(TRIES))
}

/// One generated subject held in memory.
pub struct Subject {
    pub id: String,
    pub volumes: Vec<Volume>,
    pub brain: MaskVolume,
    pub truth: Option<MaskVolume>,
}

/// Generate a subject (healthy when `lesion_cfg` is None); the rng stream is
/// derived from (seed, subject index), so subjects regenerate bit-identically.
pub fn generate_subject(
    spec: &PhantomSpec,
    lesion_cfg: Option<&LesionConfig>,
    seed: u64,
    index: usize,
) -> Result<Subject, PhantomError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let (labels, brain) = generate_anatomy(spec, &mut rng)?;
    let mut volumes = Vec::with_capacity(spec.modality_count());
    for m in 0..spec.modality_count() {
        volumes.push(render_modality(&labels, &brain, spec, m, &mut rng)?);
    }
    let truth = match lesion_cfg {
        Some(cfg) => {
            let lesion = sample_lesion(&brain, cfg, &mut rng)?;
            Some(inject_lesion(&mut volumes, &brain, &lesion, &mut rng)?)
        }
        None => None,
    };
    Ok(Subject { id: format!("s{index:03}"), volumes, brain, truth })
}

/// Write a reproducible dataset (volumes as VV1 plus a JSON manifest) and
/// return the manifest.
pub fn generate_dataset(
    n_healthy: usize,
    n_abnormal: usize,
    spec: &PhantomSpec,
    lesion_cfg: &LesionConfig,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest, PhantomError> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut subjects = Vec::new();
    for i in 0..n_healthy + n_abnormal {
        let abnormal = i >= n_healthy;
        let subject = generate_subject(spec, abnormal.then_some(lesion_cfg), seed, i)?;
        let mut volume_paths = Vec::new();
        for (m, v) in subject.volumes.iter().enumerate() {
            let name = format!("{}_m{}.vv1", subject.id, m + 1);
            save_volume(v, out_dir.join(&name))?;
            volume_paths.push(name);
        }
        let truth_path = match &subject.truth {
            Some(t) => {
                let name = format!("{}_truth.vv1", subject.id);
                save_mask(t, out_dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        subjects.push(SubjectEntry {
            id: subject.id,
            role: if abnormal { Role::Abnormal } else { Role::Healthy },
            volumes: volume_paths,
            truth: truth_path,
        });
    }
    let manifest = DatasetManifest {
        version: 1,
        dims: spec.dims,
        modalities: (1..=spec.modality_count()).map(|m| format!("m{m}")).collect(),
        subjects,
    };
    manifest
        .save(out_dir.join("manifest.json"))
        .map_err(|e| PhantomError::Manifest(e.to_string()))?;
    Ok(manifest)
}
