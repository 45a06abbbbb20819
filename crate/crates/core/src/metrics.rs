//! Voxel-level evaluation: pooled average precision, Dice overlap, and
//! region-wise reconstruction error reports.
//!
//! AP pools every in-brain voxel across all records into one ranking and
//! integrates the precision-recall curve with step interpolation; voxels
//! sharing a score are processed as one block so ordering among ties cannot
//! change the result.

use thiserror::Error;

use crate::vol::{MaskVolume, Volume};

#[derive(Error, Debug)]
pub enum MetricsError {
    #[error("no positive voxels in the pooled records")]
    NoPositives,
    #[error("record dims differ: {0}")]
    DimMismatch(String),
    #[error("empty {0} region")]
    EmptyRegion(&'static str),
    #[error("empty dataset")]
    EmptyDataset,
}

/// One subject's scored map with its ground truth and brain mask.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub subject: String,
    pub modality: String,
    pub map: Volume,
    pub truth: MaskVolume,
    pub brain: MaskVolume,
}

impl EvalRecord {
    fn check(&self) -> Result<(), MetricsError> {
        if self.map.dims() != self.truth.dims() || self.map.dims() != self.brain.dims() {
            return Err(MetricsError::DimMismatch(format!(
                "subject {}: map {:?}, truth {:?}, brain {:?}",
                self.subject,
                self.map.dims(),
                self.truth.dims(),
                self.brain.dims()
            )));
        }
        Ok(())
    }
}

/// Pooled average precision over all in-brain voxels of the records.
pub fn average_precision(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut pool: Vec<(f32, bool)> = Vec::new();
    for r in records {
        r.check()?;
        for i in 0..r.map.len() {
            if r.brain.voxels()[i] == 1 {
                pool.push((r.map.voxels()[i], r.truth.voxels()[i] == 1));
            }
        }
    }
    average_precision_pool(&mut pool)
}

/// AP of an explicit (score, label) pool; consumed by oracle tests too.
pub fn average_precision_pool(pool: &mut [(f32, bool)]) -> Result<f64, MetricsError> {
    let total_pos = pool.iter().filter(|(_, l)| *l).count();
    if total_pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    pool.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut ap = 0.0f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall_prev = 0.0f64;
    let mut i = 0;
    while i < pool.len() {
        let score = pool[i].0;
        let mut j = i;
        while j < pool.len() && pool[j].0 == score {
            if pool[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / total_pos as f64;
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j;
    }
    Ok(ap)
}

/// Dice overlap `2TP / (2TP + FP + FN)`; two empty masks count as 1.
pub fn dice(pred: &MaskVolume, truth: &MaskVolume) -> Result<f64, MetricsError> {
    if pred.dims() != truth.dims() {
        return Err(MetricsError::DimMismatch(format!(
            "pred {:?} vs truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &t) in pred.voxels().iter().zip(truth.voxels().iter()) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64))
}

/// Binarize a score map at `threshold` (score >= threshold is positive).
pub fn binarize(map: &Volume, threshold: f32) -> MaskVolume {
    let voxels = map.voxels().iter().map(|&s| u8::from(s >= threshold)).collect();
    MaskVolume::new(map.dims(), voxels).expect("values are 0/1 by construction")
}

/// Mean per-subject Dice of the records binarized at one shared threshold.
pub fn dataset_dice(records: &[EvalRecord], threshold: f32) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut acc = 0.0;
    for r in records {
        r.check()?;
        acc += dice(&binarize(&r.map, threshold), &r.truth)?;
    }
    Ok(acc / records.len() as f64)
}

/// Mean absolute reconstruction error split by region.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconErrorReport {
    /// Mean |x_a - x_r| over normal brain (brain and not truth).
    pub l1_re_n: f64,
    /// Mean |x_a - x_r| over the lesion region.
    pub l1_re_a: f64,
    /// `l1_re_a / l1_re_n`, None when the normal error is zero.
    pub l1_ratio: Option<f64>,
}

/// Region-wise mean L1 between an input and its reconstruction.
pub fn region_l1_errors(
    x_a: &Volume,
    x_r: &Volume,
    truth: &MaskVolume,
    brain: &MaskVolume,
) -> Result<ReconErrorReport, MetricsError> {
    if x_a.dims() != x_r.dims() || x_a.dims() != truth.dims() || x_a.dims() != brain.dims() {
        return Err(MetricsError::DimMismatch("region_l1_errors inputs".into()));
    }
    let mut sum_n = 0.0f64;
    let mut count_n = 0usize;
    let mut sum_a = 0.0f64;
    let mut count_a = 0usize;
    for i in 0..x_a.len() {
        let err = (x_a.voxels()[i] - x_r.voxels()[i]).abs() as f64;
        if truth.voxels()[i] == 1 {
            sum_a += err;
            count_a += 1;
        } else if brain.voxels()[i] == 1 {
            sum_n += err;
            count_n += 1;
        }
    }
    if count_n == 0 {
        return Err(MetricsError::EmptyRegion("normal"));
    }
    if count_a == 0 {
        return Err(MetricsError::EmptyRegion("abnormal"));
    }
    let l1_re_n = sum_n / count_n as f64;
    let l1_re_a = sum_a / count_a as f64;
    let l1_ratio = if l1_re_n > 0.0 { Some(l1_re_a / l1_re_n) } else { None };
    Ok(ReconErrorReport { l1_re_n, l1_re_a, l1_ratio })
}
