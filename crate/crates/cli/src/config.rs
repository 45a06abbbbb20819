//! Declarative run configuration, parsed from JSON with strict schema
//! validation (unknown keys are rejected). Every field has a documented
//! default, so `{}` is a complete desk-scale configuration.

use serde::{Deserialize, Serialize};
use voxad_core::anomaly::ScoreConfig;
use voxad_core::phantom::{LesionConfig, PhantomSpec};
use voxad_core::prep::default_percentiles;
use voxad_core::trainer::TrainConfig;

/// Dataset generation section.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Healthy (training) subject count.
    pub n_healthy: usize,
    /// Abnormal (lesioned) subject count.
    pub n_abnormal: usize,
    pub phantom: PhantomSpec,
    pub lesions: LesionConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_healthy: 32,
            n_abnormal: 16,
            phantom: PhantomSpec::default(),
            lesions: LesionConfig::default(),
        }
    }
}

/// Histogram standardization section.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    /// Landmark percentile positions.
    pub percentiles: Vec<f64>,
    /// Estimate landmarks over foreground voxels only.
    pub mask_aware: bool,
    /// Fixed intensity scale applied before clipping to [0, 1].
    pub scale: f32,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self { percentiles: default_percentiles(), mask_aware: true, scale: 1.0 }
    }
}

/// Hyperparameter search section: the grids of the three search kinds.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Margin grid (both alpha axes).
    pub margin_grid: Vec<f64>,
    /// Minimum-filter kernel grid (0 disables the filter).
    pub min_kernel_grid: Vec<f64>,
    /// Mean-filter kernel grid (0 disables the filter).
    pub mean_kernel_grid: Vec<f64>,
    /// Loss-weight grid for lambda_a, lambda_m, lambda_ae (lambda_rec fixed at 1).
    pub weight_grid: Vec<f64>,
    /// Epoch override for search-time retraining (0 keeps `train.epochs`).
    pub epochs: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            margin_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            min_kernel_grid: vec![0.0, 3.0, 5.0, 7.0, 9.0],
            mean_kernel_grid: (0..=7).map(|i| (2 * i + 1) as f64)
                .map(|k| if k == 1.0 { 0.0 } else { k })
                .collect(),
            weight_grid: vec![0.01, 0.1, 1.0, 10.0],
            epochs: 0,
        }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; all randomness in a run derives from it (the embedded
    /// `train.seed` is overwritten with this value).
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub prep: PrepConfig,
    pub search: SearchConfig,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }
}
