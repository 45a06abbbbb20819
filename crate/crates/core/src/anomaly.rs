//! Detection-time pipeline: restore a volume to its pseudo-healthy
//! counterpart, score voxelwise differences, post-process the score map, and
//! search a shared binarization threshold.
//!
//! The hybrid score multiplies the absolute intensity difference by the
//! structural dissimilarity `1 - SSIM`; the SSIM factor is clamped to [0, 1]
//! by default so hybrid scores never exceed plain L1 (a `no-clamp` mode keeps
//! the raw factor, which can reach 2).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edges::{extract_edges, EdgeBackend};
use crate::metrics::{binarize, dice, MetricsError};
use crate::nets::{anatomy::anatomy_map, modality::extract_modality, tensor_to_volume, Models, NetError};
use crate::ssim::{ssim_map, SsimError, SsimParams};
use crate::vol::{brain_mask, erode_mask, mean_filter, min_filter, KernelSpec, MaskVolume, VolError, Volume};

/// Per-voxel nonnegative anomaly scores.
pub type AnomalyMap = Volume;

#[derive(Error, Debug)]
pub enum AnomalyError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Vol(#[from] VolError),
    #[error(transparent)]
    Ssim(#[from] SsimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("volume dims {0:?} and {1:?} differ")]
    DimMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("binarization needs {0} truths for {1} maps")]
    TruthCount(usize, usize),
}

/// Which voxelwise difference drives the anomaly map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    L1,
    Ssim,
    Hybrid,
}

/// Module toggles of the restoration pipeline; all on by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineToggles {
    pub use_disentangle: bool,
    pub use_edge_restoration: bool,
    pub use_modality_reuse: bool,
    pub edge_backend: EdgeBackend,
}

impl Default for PipelineToggles {
    fn default() -> Self {
        Self {
            use_disentangle: true,
            use_edge_restoration: true,
            use_modality_reuse: true,
            edge_backend: EdgeBackend::LabelBoundary,
        }
    }
}

/// Scoring and post-processing configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub kind: ScoreKind,
    pub ssim: SsimParams,
    /// Clamp the `1 - SSIM` factor to [0, 1] before multiplying.
    pub clamp_ssim_term: bool,
    /// Minimum-filter kernel side (0 disables).
    pub min_kernel: usize,
    /// Mean-filter kernel side (0 disables).
    pub mean_kernel: usize,
    /// Brain-mask erosion kernel side (0 disables).
    pub erosion_kernel: usize,
    /// Cap on binarization threshold candidates (distinct pooled scores are
    /// quantile-subsampled beyond this).
    pub max_threshold_candidates: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            kind: ScoreKind::Hybrid,
            ssim: SsimParams::default(),
            clamp_ssim_term: true,
            min_kernel: 3,
            mean_kernel: 9,
            erosion_kernel: 3,
            max_threshold_candidates: 512,
        }
    }
}

/// Restore a (possibly abnormal) volume into its pseudo-healthy counterpart:
/// anatomy map -> edges -> restored code, recombined with the modality vector
/// of the input. Toggles rewire the path for the module ablations.
pub fn reconstruct_phi<E: crate::autodiff::Element>(
    models: &Models<E>,
    toggles: &PipelineToggles,
    x_a: &Volume,
) -> Result<Volume, AnomalyError> {
    let tape = crate::autodiff::Tape::new();
    let modality = if toggles.use_modality_reuse {
        extract_modality(&models.modality, &tape, x_a)?
    } else {
        models.zero_modality(&tape)
    };
    let code = match (toggles.use_disentangle, toggles.use_edge_restoration) {
        (true, true) => {
            let map_t = anatomy_map(&models.anatomy, &tape, x_a)?;
            // edges are a detach point: extraction runs on materialized values
            let map = tensor_to_volume(&map_t)?;
            let edges = extract_edges(&map, toggles.edge_backend);
            models.edge_restorer.encode_volume(&tape, &edges.to_volume())?
        }
        (true, false) => {
            let map_t = anatomy_map(&models.anatomy, &tape, x_a)?;
            let map = tensor_to_volume(&map_t)?;
            models.map_encoder.encode_volume(&tape, &map)?
        }
        (false, true) => {
            // intensity edges straight from the raw volume
            let edges = extract_edges(x_a, EdgeBackend::Canny3d);
            models.edge_restorer.encode_volume(&tape, &edges.to_volume())?
        }
        (false, false) => {
            return Err(AnomalyError::Config(
                "at least one of disentanglement and edge restoration must be enabled".into(),
            ))
        }
    };
    let out = models.combiner.forward(&tape, &code, &modality)?;
    Ok(tensor_to_volume(&out)?)
}

/// Voxelwise anomaly scores between an input and its restoration.
pub fn hybrid_score(x_a: &Volume, x_r: &Volume, cfg: &ScoreConfig) -> Result<AnomalyMap, AnomalyError> {
    if x_a.dims() != x_r.dims() {
        return Err(AnomalyError::DimMismatch(x_a.dims(), x_r.dims()));
    }
    let l1 = |i: usize| (x_a.voxels()[i] - x_r.voxels()[i]).abs();
    let values: Vec<f32> = match cfg.kind {
        ScoreKind::L1 => (0..x_a.len()).map(l1).collect(),
        ScoreKind::Ssim | ScoreKind::Hybrid => {
            let s = ssim_map(x_a, x_r, &cfg.ssim)?;
            let factor = |i: usize| {
                let f = 1.0 - s.voxels()[i];
                if cfg.clamp_ssim_term {
                    f.clamp(0.0, 1.0)
                } else {
                    f.max(0.0)
                }
            };
            match cfg.kind {
                ScoreKind::Ssim => (0..x_a.len()).map(factor).collect(),
                _ => (0..x_a.len()).map(|i| l1(i) * factor(i)).collect(),
            }
        }
    };
    Ok(Volume::new(x_a.dims(), values)?)
}

/// Post-processing: minimum filter, then mean filter, then masking by the
/// eroded brain mask. A kernel side of 0 disables that stage.
pub fn postprocess(
    map: &AnomalyMap,
    brain: &MaskVolume,
    cfg: &ScoreConfig,
) -> Result<AnomalyMap, AnomalyError> {
    if map.dims() != brain.dims() {
        return Err(AnomalyError::DimMismatch(map.dims(), brain.dims()));
    }
    let m = min_filter(map, &KernelSpec::minimum(cfg.min_kernel))?;
    let m = mean_filter(&m, &KernelSpec::mean(cfg.mean_kernel))?;
    let eroded = erode_mask(brain, &KernelSpec::erosion(cfg.erosion_kernel))?;
    let masked: Vec<f32> = m
        .voxels()
        .iter()
        .zip(eroded.voxels().iter())
        .map(|(&v, &b)| v * b as f32)
        .collect();
    Ok(Volume::new(map.dims(), masked)?)
}

/// Full scoring path for one subject: restore, score, post-process.
pub fn score_volume<E: crate::autodiff::Element>(
    models: &Models<E>,
    toggles: &PipelineToggles,
    cfg: &ScoreConfig,
    x_a: &Volume,
) -> Result<ScoredVolume, AnomalyError> {
    let restored = reconstruct_phi(models, toggles, x_a)?;
    let raw = hybrid_score(x_a, &restored, cfg)?;
    let brain = brain_mask(x_a);
    let map = postprocess(&raw, &brain, cfg)?;
    Ok(ScoredVolume { restored, raw, map, brain })
}

/// Restoration plus raw and post-processed score maps.
pub struct ScoredVolume {
    pub restored: Volume,
    pub raw: AnomalyMap,
    pub map: AnomalyMap,
    pub brain: MaskVolume,
}

/// Result of the dataset-wide greedy threshold search.
#[derive(Debug, Clone)]
pub struct BinarizeResult {
    pub threshold: f32,
    pub dataset_dice: f64,
    pub masks: Vec<MaskVolume>,
    /// All pooled scores were equal; the threshold is meaningless.
    pub degenerate: bool,
}

/// Greedy search for the single threshold maximizing mean per-subject Dice.
///
/// Candidates are the distinct pooled score values, quantile-subsampled to at
/// most `cfg.max_threshold_candidates` (exhaustive when `exhaustive` is set);
/// ties resolve to the smallest threshold.
pub fn binarize_optimal(
    maps: &[AnomalyMap],
    truths: &[MaskVolume],
    cfg: &ScoreConfig,
    exhaustive: bool,
) -> Result<BinarizeResult, AnomalyError> {
    if maps.is_empty() {
        return Err(AnomalyError::Metrics(MetricsError::EmptyDataset));
    }
    if maps.len() != truths.len() {
        return Err(AnomalyError::TruthCount(truths.len(), maps.len()));
    }
    for (m, t) in maps.iter().zip(truths.iter()) {
        if m.dims() != t.dims() {
            return Err(AnomalyError::DimMismatch(m.dims(), t.dims()));
        }
    }
    let mut pooled: Vec<f32> = maps.iter().flat_map(|m| m.voxels().iter().copied()).collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    pooled.dedup();
    let degenerate = pooled.len() == 1;
    let candidates: Vec<f32> = if exhaustive || pooled.len() <= cfg.max_threshold_candidates {
        pooled
    } else {
        let k = cfg.max_threshold_candidates;
        (0..k).map(|i| pooled[i * (pooled.len() - 1) / (k - 1)]).collect()
    };
    let mut best_t = candidates[0];
    let mut best_dice = f64::NEG_INFINITY;
    for &t in &candidates {
        let mut acc = 0.0;
        for (m, truth) in maps.iter().zip(truths.iter()) {
            acc += dice(&binarize(m, t), truth)?;
        }
        let mean = acc / maps.len() as f64;
        if mean > best_dice {
            best_dice = mean;
            best_t = t;
        }
    }
    let masks = maps.iter().map(|m| binarize(m, best_t)).collect();
    Ok(BinarizeResult { threshold: best_t, dataset_dice: best_dice, masks, degenerate })
}
