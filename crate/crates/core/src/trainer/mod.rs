//! Joint training of the five networks: paired-subject batches, the weighted
//! multi-term objective, Adam updates, periodic validation with best-model
//! selection, and checkpointing of parameters plus optimizer state.

pub mod search;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anomaly::{score_volume, AnomalyError, PipelineToggles, ScoreConfig};
use crate::autodiff::param::{
    load_checkpoint, save_checkpoint, CheckpointEntry, CheckpointError,
};
use crate::autodiff::{Element, Tape, Tensor};
use crate::edges::{extract_edges, EdgeBackend};
use crate::losses::{
    anatomy_consistency, anatomy_similarity, code_consistency, modality_consistency,
    modality_similarity, synthesis_loss, LossError, LossParts, LossWeights, Margins,
};
use crate::manifest::{DatasetManifest, ManifestError, Role};
use crate::metrics::{average_precision, EvalRecord, MetricsError};
use crate::nets::{
    anatomy::{anatomy_map, differentiable_one_hot, extract_anatomy, merge_channels},
    modality::extract_modality,
    tensor_to_volume, Models, NetConfig, NetError,
};
use crate::vol::{brain_mask, MaskVolume, Volume};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Anomaly(#[from] AnomalyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("non-finite total loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

/// Which objective terms are active (the loss ablation axes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    pub reconstruction: bool,
    pub restoration: bool,
    pub anatomy_consistency: bool,
    pub anatomy_similarity: bool,
    pub modality_consistency: bool,
    pub modality_similarity: bool,
    pub code_consistency: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            reconstruction: true,
            restoration: true,
            anatomy_consistency: true,
            anatomy_similarity: true,
            modality_consistency: true,
            modality_similarity: true,
            code_consistency: true,
        }
    }
}

/// Full training configuration; defaults are the desk-scale settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub dims: [usize; 3],
    /// Modalities per subject (K >= 2).
    pub modalities: usize,
    pub weights: LossWeights,
    pub margins: Margins,
    pub nets: NetConfig,
    pub toggles: PipelineToggles,
    pub loss_toggles: LossToggles,
    /// Run validation every this many epochs (0 disables).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 1e-4,
            seed: 0,
            dims: [24, 24, 24],
            modalities: 2,
            weights: LossWeights::default(),
            margins: Margins::default(),
            nets: NetConfig::default(),
            toggles: PipelineToggles::default(),
            loss_toggles: LossToggles::default(),
            validate_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("epochs and learning_rate must be positive".into()));
        }
        if self.modalities < 2 {
            return Err(TrainError::Config("need at least 2 modalities".into()));
        }
        if self.dims.iter().any(|&d| d % 4 != 0) {
            return Err(TrainError::Config(format!("dims {:?} must be divisible by 4", self.dims)));
        }
        Ok(())
    }

    pub fn dims_tuple(&self) -> (usize, usize, usize) {
        (self.dims[0], self.dims[1], self.dims[2])
    }
}

/// One subject held in memory for training or evaluation.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub id: String,
    pub volumes: Vec<Volume>,
    pub brain: MaskVolume,
    pub truth: Option<MaskVolume>,
}

/// Load all subjects of a role from a manifest directory; the brain mask
/// comes from the first modality (paired modalities share geometry).
pub fn load_subjects(
    manifest: &DatasetManifest,
    dir: &std::path::Path,
    role: Role,
) -> Result<Vec<SubjectData>, TrainError> {
    let mut out = Vec::new();
    for entry in manifest.subjects.iter().filter(|s| s.role == role) {
        let volumes = entry.load_volumes(dir)?;
        if volumes.is_empty() {
            return Err(TrainError::Config(format!("subject {} has no volumes", entry.id)));
        }
        let brain = brain_mask(&volumes[0]);
        let truth = entry.load_truth(dir)?;
        out.push(SubjectData { id: entry.id.clone(), volumes, brain, truth });
    }
    Ok(out)
}

/// Two distinct subjects with all their modalities.
pub struct TrainingBatch<'a> {
    pub subjects: [&'a SubjectData; 2],
}

/// Sample two distinct subjects uniformly; deterministic under the rng seed.
pub fn sample_pair_batch<'a>(
    dataset: &'a [SubjectData],
    rng: &mut ChaCha8Rng,
) -> Result<TrainingBatch<'a>, TrainError> {
    if dataset.len() < 2 {
        return Err(TrainError::TooFewSubjects(dataset.len()));
    }
    let a = rng.gen_range(0..dataset.len());
    let b = loop {
        let c = rng.gen_range(0..dataset.len());
        if c != a {
            break c;
        }
    };
    Ok(TrainingBatch { subjects: [&dataset[a], &dataset[b]] })
}

/// Adam accumulators, one slot per parameter in registry order.
pub struct AdamState<E: Element> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    slots: Vec<(Vec<E>, Vec<E>)>,
}

impl<E: Element> AdamState<E> {
    pub fn new(models: &Models<E>) -> Self {
        let slots = models
            .params
            .iter()
            .map(|p| {
                let n = p.borrow().values.len();
                (vec![E::ZERO; n], vec![E::ZERO; n])
            })
            .collect();
        Self { step: 0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, slots }
    }

    /// One bias-corrected Adam update from the accumulated gradients.
    pub fn step(&mut self, models: &Models<E>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one_minus_b1 = E::from_f64(1.0 - self.beta1);
        let one_minus_b2 = E::from_f64(1.0 - self.beta2);
        let corr1 = E::from_f64(1.0 / (1.0 - self.beta1.powi(t)));
        let corr2 = E::from_f64(1.0 / (1.0 - self.beta2.powi(t)));
        let lr = E::from_f64(lr);
        let eps = E::from_f64(self.epsilon);
        for (p, (m, v)) in models.params.iter().zip(self.slots.iter_mut()) {
            let mut pb = p.borrow_mut();
            let (values, grad) = {
                let pbr = &mut *pb;
                (&mut pbr.values, &pbr.grad)
            };
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_minus_b1 * g;
                v[i] = b2 * v[i] + one_minus_b2 * g * g;
                let mhat = m[i] * corr1;
                let vhat = v[i] * corr2;
                values[i] = values[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Per-step scalar loss report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub reconstruction: f64,
    pub restoration: f64,
    pub anatomy_consistency: f64,
    pub anatomy_similarity: f64,
    pub modality_consistency: f64,
    pub modality_similarity: f64,
    pub code_consistency: f64,
    pub total: f64,
}

impl StepReport {
    /// Recombine the parts with the weights; matches `total` to roundoff.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.lambda_rec * (self.reconstruction + self.restoration)
            + w.lambda_a * (self.anatomy_consistency + self.anatomy_similarity)
            + w.lambda_m * (self.modality_consistency + self.modality_similarity)
            + w.lambda_ae * self.code_consistency
    }

    pub const CSV_HEADER: &'static str =
        "step,reconstruction,restoration,anatomy_consistency,anatomy_similarity,modality_consistency,modality_similarity,code_consistency,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.reconstruction,
            self.restoration,
            self.anatomy_consistency,
            self.anatomy_similarity,
            self.modality_consistency,
            self.modality_similarity,
            self.code_consistency,
            self.total
        )
    }
}

/// Forward every path of the batch, combine the active losses, backpropagate
/// and apply one Adam update. Module toggles rewire the graph; disabled loss
/// terms contribute exact zeros.
pub fn train_step<E: Element>(
    models: &Models<E>,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    opt: &mut AdamState<E>,
) -> Result<StepReport, TrainError> {
    let k = cfg.modalities;
    for s in batch.subjects {
        if s.volumes.len() != k {
            return Err(TrainError::Config(format!(
                "subject {} has {} modalities, config says {k}",
                s.id,
                s.volumes.len()
            )));
        }
    }
    models.params.zero_grads();
    let tape: Tape<E> = Tape::new();
    let t = &cfg.toggles;

    // per subject and modality: inputs, maps, modality vectors, codes
    let mut inputs: Vec<Vec<Tensor<E>>> = Vec::with_capacity(2);
    let mut maps: Vec<Vec<Tensor<E>>> = Vec::with_capacity(2);
    let mut vectors: Vec<Vec<Tensor<E>>> = Vec::with_capacity(2);
    let mut map_codes: Vec<Vec<Tensor<E>>> = Vec::with_capacity(2);
    let mut edge_codes: Vec<Vec<Tensor<E>>> = Vec::with_capacity(2);
    for subject in batch.subjects {
        let mut row_in = Vec::with_capacity(k);
        let mut row_map = Vec::with_capacity(k);
        let mut row_vec = Vec::with_capacity(k);
        let mut row_mc = Vec::with_capacity(k);
        let mut row_ec = Vec::with_capacity(k);
        for x in &subject.volumes {
            row_in.push(crate::nets::volume_to_tensor(&tape, x));
            let vector = if t.use_modality_reuse {
                extract_modality(&models.modality, &tape, x)?
            } else {
                models.zero_modality(&tape)
            };
            if t.use_disentangle {
                let logits = extract_anatomy(&models.anatomy, &tape, x)?;
                let one_hot = differentiable_one_hot(&logits)?;
                let map = merge_channels(&one_hot, &subject.brain)?;
                // the class-map encoder consumes the differentiable map
                row_mc.push(models.map_encoder.forward(&tape, &map)?);
                if t.use_edge_restoration {
                    // edge extraction runs on materialized values: detach point
                    let map_vol = tensor_to_volume(&map)?;
                    let edges = extract_edges(&map_vol, t.edge_backend);
                    row_ec.push(models.edge_restorer.encode_volume(&tape, &edges.to_volume())?);
                }
                row_map.push(map);
            } else if t.use_edge_restoration {
                let edges = extract_edges(x, EdgeBackend::Canny3d);
                row_ec.push(models.edge_restorer.encode_volume(&tape, &edges.to_volume())?);
            }
            row_vec.push(vector);
        }
        inputs.push(row_in);
        maps.push(row_map);
        vectors.push(row_vec);
        map_codes.push(row_mc);
        edge_codes.push(row_ec);
    }

    let zero = || tape.scalar(E::ZERO);
    let lt = &cfg.loss_toggles;

    // synthesis tables: outputs[i][j] decodes modality-i structure with
    // modality-j appearance
    let decode_table = |codes: &Vec<Vec<Tensor<E>>>, s: usize| -> Result<Vec<Vec<Tensor<E>>>, TrainError> {
        let mut table = Vec::with_capacity(k);
        for i in 0..k {
            let mut row = Vec::with_capacity(k);
            for j in 0..k {
                row.push(models.combiner.forward(&tape, &codes[s][i], &vectors[s][j])?);
            }
            table.push(row);
        }
        Ok(table)
    };

    let mut recon = zero();
    if lt.reconstruction && t.use_disentangle {
        for s in 0..2 {
            let table = decode_table(&map_codes, s)?;
            recon = recon.add(&synthesis_loss(&inputs[s], &table)?).map_err(LossError::from)?;
        }
    }
    let mut rest = zero();
    if lt.restoration && t.use_edge_restoration {
        for s in 0..2 {
            let table = decode_table(&edge_codes, s)?;
            rest = rest.add(&synthesis_loss(&inputs[s], &table)?).map_err(LossError::from)?;
        }
    }
    let mut con_a = zero();
    let mut sim_a = zero();
    if t.use_disentangle {
        if lt.anatomy_consistency {
            for s in 0..2 {
                con_a = con_a.add(&anatomy_consistency(&maps[s])?).map_err(LossError::from)?;
            }
        }
        if lt.anatomy_similarity {
            sim_a = anatomy_similarity(&maps[0], &maps[1], cfg.margins.alpha_a)?;
        }
    }
    let mut con_m = zero();
    let mut sim_m = zero();
    if t.use_modality_reuse {
        if lt.modality_consistency {
            let grouped: Vec<Vec<Tensor<E>>> = (0..k)
                .map(|i| vec![vectors[0][i].clone(), vectors[1][i].clone()])
                .collect();
            con_m = modality_consistency(&grouped)?;
        }
        if lt.modality_similarity {
            sim_m = modality_similarity(&vectors[0], &vectors[1], cfg.margins.alpha_m)?;
        }
    }
    let mut con_ae = zero();
    if lt.code_consistency && t.use_disentangle && t.use_edge_restoration {
        for s in 0..2 {
            for i in 0..k {
                con_ae = con_ae
                    .add(&code_consistency(&edge_codes[s][i], &map_codes[s][i])?)
                    .map_err(LossError::from)?;
            }
        }
    }

    let parts = LossParts {
        reconstruction: recon,
        restoration: rest,
        anatomy_consistency: con_a,
        anatomy_similarity: sim_a,
        modality_consistency: con_m,
        modality_similarity: sim_m,
        code_consistency: con_ae,
    };
    let total = parts.total(&cfg.weights)?;
    let report = StepReport {
        step: opt.step + 1,
        reconstruction: parts.reconstruction.item().to_f64(),
        restoration: parts.restoration.item().to_f64(),
        anatomy_consistency: parts.anatomy_consistency.item().to_f64(),
        anatomy_similarity: parts.anatomy_similarity.item().to_f64(),
        modality_consistency: parts.modality_consistency.item().to_f64(),
        modality_similarity: parts.modality_similarity.item().to_f64(),
        code_consistency: parts.code_consistency.item().to_f64(),
        total: total.item().to_f64(),
    };
    if !report.total.is_finite() {
        return Err(TrainError::NonFiniteLoss { step: report.step, detail: format!("{report:?}") });
    }
    total.backward().map_err(LossError::from)?;
    opt.step(models, cfg.learning_rate);
    Ok(report)
}

/// AP per modality over an abnormal set, running the full detection path.
pub fn validate_ap<E: Element>(
    models: &Models<E>,
    toggles: &PipelineToggles,
    score: &ScoreConfig,
    abnormal: &[SubjectData],
) -> Result<Vec<f64>, TrainError> {
    if abnormal.is_empty() {
        return Err(TrainError::TooFewSubjects(0));
    }
    let k = abnormal[0].volumes.len();
    let mut per_modality = Vec::with_capacity(k);
    for m in 0..k {
        let mut records = Vec::new();
        for subject in abnormal {
            let truth = subject.truth.clone().ok_or_else(|| {
                TrainError::Config(format!("validation subject {} lacks a truth mask", subject.id))
            })?;
            let scored = score_volume(models, toggles, score, &subject.volumes[m])?;
            records.push(EvalRecord {
                subject: subject.id.clone(),
                modality: format!("m{}", m + 1),
                map: scored.map,
                truth,
                brain: scored.brain,
            });
        }
        per_modality.push(average_precision(&records)?);
    }
    Ok(per_modality)
}

/// Full training outcome: per-step reports, validation history, best epoch.
pub struct TrainOutcome {
    pub reports: Vec<StepReport>,
    pub validations: Vec<(usize, Vec<f64>)>,
    pub best_epoch: Option<usize>,
}

/// Train for the configured epochs; when a validation set and score config
/// are given, track mean-AP and restore the best parameters at the end.
pub fn train<E: Element>(
    models: &Models<E>,
    opt: &mut AdamState<E>,
    dataset: &[SubjectData],
    cfg: &TrainConfig,
    validation: Option<(&[SubjectData], &ScoreConfig)>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(TrainError::TooFewSubjects(dataset.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = dataset.len().div_ceil(2);
    let mut reports = Vec::new();
    let mut validations = Vec::new();
    let mut best: Option<(f64, usize, Vec<CheckpointEntry>)> = None;
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let batch = sample_pair_batch(dataset, &mut rng)?;
            reports.push(train_step(models, &batch, cfg, opt)?);
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.validate_every > 0 && (epoch + 1) % cfg.validate_every == 0;
        if let Some((val_set, score)) = validation {
            if due || last {
                let aps = validate_ap(models, &cfg.toggles, score, val_set)?;
                let mean = aps.iter().sum::<f64>() / aps.len() as f64;
                validations.push((epoch, aps));
                if best.as_ref().map_or(true, |(b, _, _)| mean > *b) {
                    best = Some((mean, epoch, models.params.to_entries()));
                }
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, entries)) => {
            models.params.apply_entries(&entries)?;
            Some(epoch)
        }
        None => None,
    };
    Ok(TrainOutcome { reports, validations, best_epoch })
}

/// Persist model parameters and optimizer state as one DACKPT1 file.
pub fn checkpoint_save<E: Element>(
    models: &Models<E>,
    opt: &AdamState<E>,
    path: impl AsRef<std::path::Path>,
) -> Result<(), TrainError> {
    let mut entries = models.params.to_entries();
    entries.push(CheckpointEntry {
        name: "opt.step".into(),
        shape: vec![1],
        values: vec![opt.step as f32],
    });
    for (p, (m, v)) in models.params.iter().zip(opt.slots.iter()) {
        let pb = p.borrow();
        entries.push(CheckpointEntry {
            name: format!("opt.m.{}", pb.name),
            shape: pb.shape.clone(),
            values: m.iter().map(|&x| x.to_f64() as f32).collect(),
        });
        entries.push(CheckpointEntry {
            name: format!("opt.v.{}", pb.name),
            shape: pb.shape.clone(),
            values: v.iter().map(|&x| x.to_f64() as f32).collect(),
        });
    }
    save_checkpoint(path, &entries)?;
    Ok(())
}

/// Restore parameters and optimizer state; shapes must match the models.
pub fn checkpoint_load<E: Element>(
    models: &Models<E>,
    opt: &mut AdamState<E>,
    path: impl AsRef<std::path::Path>,
) -> Result<(), TrainError> {
    let entries = load_checkpoint(path)?;
    models.params.apply_entries(&entries)?;
    let find = |name: &str| -> Result<&CheckpointEntry, TrainError> {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| TrainError::Checkpoint(CheckpointError::Missing(name.to_string())))
    };
    opt.step = find("opt.step")?.values[0] as u64;
    for (p, (m, v)) in models.params.iter().zip(opt.slots.iter_mut()) {
        let name = p.borrow().name.clone();
        let shape = p.borrow().shape.clone();
        for (slot, key) in [(&mut *m, format!("opt.m.{name}")), (&mut *v, format!("opt.v.{name}"))] {
            let e = find(&key)?;
            if e.shape != shape {
                return Err(TrainError::Checkpoint(CheckpointError::ShapeMismatch {
                    name: key,
                    found: e.shape.clone(),
                    expected: shape.clone(),
                }));
            }
            for (s, &x) in slot.iter_mut().zip(e.values.iter()) {
                *s = E::from_f64(x as f64);
            }
        }
    }
    Ok(())
}

/// Parameter-only model checkpoint (no optimizer), for trained artifacts.
pub fn model_save<E: Element>(
    models: &Models<E>,
    path: impl AsRef<std::path::Path>,
) -> Result<(), TrainError> {
    save_checkpoint(path, &models.params.to_entries())?;
    Ok(())
}

/// Load parameters written by either checkpoint flavor.
pub fn model_load<E: Element>(
    models: &Models<E>,
    path: impl AsRef<std::path::Path>,
) -> Result<(), TrainError> {
    let entries = load_checkpoint(path)?;
    models.params.apply_entries(&entries)?;
    Ok(())
}

/// Anatomy-map agreement fraction between two volumes (voxel classes equal),
/// evaluated inside the union of their brain masks.
pub fn anatomy_agreement<E: Element>(
    models: &Models<E>,
    a: &Volume,
    b: &Volume,
) -> Result<f64, TrainError> {
    let tape: Tape<E> = Tape::new();
    let ma = tensor_to_volume(&anatomy_map(&models.anatomy, &tape, a)?)?;
    let mb = tensor_to_volume(&anatomy_map(&models.anatomy, &tape, b)?)?;
    let mut same = 0usize;
    let mut total = 0usize;
    for i in 0..ma.len() {
        let (x, y) = (ma.voxels()[i], mb.voxels()[i]);
        if x > 0.0 || y > 0.0 {
            total += 1;
            if x == y {
                same += 1;
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { same as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_subject, PhantomSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            dims: [16, 16, 16],
            nets: NetConfig {
                ea_base_channels: 2,
                modality_channels: 4,
                code_channels: 4,
                encoder_mid_channels: 2,
                decoder_channels: [4, 3, 2],
                ..NetConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_subjects(n: usize) -> Vec<SubjectData> {
        let spec = PhantomSpec { dims: [16, 16, 16], ..PhantomSpec::default() };
        (0..n)
            .map(|i| {
                let s = generate_subject(&spec, None, 100, i).unwrap();
                SubjectData { id: s.id, brain: s.brain, volumes: s.volumes, truth: s.truth }
            })
            .collect()
    }

    #[test]
    fn pair_sampling_distinct_and_deterministic() {
        let subjects = tiny_subjects(3);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let b1 = sample_pair_batch(&subjects, &mut r1).unwrap();
            let b2 = sample_pair_batch(&subjects, &mut r2).unwrap();
            assert_ne!(b1.subjects[0].id, b1.subjects[1].id);
            assert_eq!(b1.subjects[0].id, b2.subjects[0].id);
            assert_eq!(b1.subjects[1].id, b2.subjects[1].id);
        }
        let one = tiny_subjects(1);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(sample_pair_batch(&one, &mut r), Err(TrainError::TooFewSubjects(1))));
    }

    #[test]
    fn two_subject_dataset_always_pairs_them() {
        let subjects = tiny_subjects(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = sample_pair_batch(&subjects, &mut rng).unwrap();
        let ids: Vec<&str> = b.subjects.iter().map(|s| s.id.as_str()).collect();
        assert!(ids.contains(&"s000") && ids.contains(&"s001"));
    }

    #[test]
    fn adam_first_step_approximates_signed_gradient() {
        let models: Models<f64> = Models::new(&tiny_cfg().nets, (16, 16, 16), 1).unwrap();
        let mut opt = AdamState::new(&models);
        let p0 = models.params.iter().next().unwrap();
        let before = p0.borrow().values.clone();
        {
            let mut pb = p0.borrow_mut();
            for g in pb.grad.iter_mut() {
                *g = 0.5; // constant positive gradient
            }
        }
        opt.step(&models, 1e-3);
        let after = p0.borrow().values.clone();
        for (a, b) in after.iter().zip(before.iter()) {
            // first bias-corrected step is -lr * sign(g) up to epsilon terms
            assert!((a - (b - 1e-3)).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let models: Models<f64> = Models::new(&tiny_cfg().nets, (16, 16, 16), 2).unwrap();
        let mut opt = AdamState::new(&models);
        let before: Vec<Vec<f64>> = models.params.iter().map(|p| p.borrow().values.clone()).collect();
        models.params.zero_grads();
        opt.step(&models, 1e-3);
        for (p, b) in models.params.iter().zip(before.iter()) {
            assert_eq!(&p.borrow().values, b);
        }
    }

    #[test]
    fn adam_second_identical_step_shrinks_update() {
        let models: Models<f64> = Models::new(&tiny_cfg().nets, (16, 16, 16), 3).unwrap();
        let mut opt = AdamState::new(&models);
        let p0 = models.params.iter().next().unwrap();
        let set_grad = |g: f64| {
            let mut pb = p0.borrow_mut();
            for gi in pb.grad.iter_mut() {
                *gi = g;
            }
        };
        let v0 = p0.borrow().values[0];
        set_grad(0.5);
        opt.step(&models, 1e-3);
        let v1 = p0.borrow().values[0];
        set_grad(0.5);
        opt.step(&models, 1e-3);
        let v2 = p0.borrow().values[0];
        let step1 = (v1 - v0).abs();
        let step2 = (v2 - v1).abs();
        assert!(step2 < step1, "second step {step2} should shrink below {step1}");
    }

    #[test]
    fn train_step_report_decomposes_total() {
        let cfg = tiny_cfg();
        let models: Models<f32> = Models::new(&cfg.nets, cfg.dims_tuple(), 7).unwrap();
        let mut opt = AdamState::new(&models);
        let subjects = tiny_subjects(2);
        let batch = TrainingBatch { subjects: [&subjects[0], &subjects[1]] };
        let report = train_step(&models, &batch, &cfg, &mut opt).unwrap();
        assert!((report.total - report.weighted_sum(&cfg.weights)).abs() < 1e-6);
        assert!(report.total.is_finite() && report.total > 0.0);
    }

    #[test]
    fn recon_only_toggles_reproduce_autoencoder_objective() {
        let mut cfg = tiny_cfg();
        cfg.loss_toggles = LossToggles {
            reconstruction: true,
            restoration: false,
            anatomy_consistency: false,
            anatomy_similarity: false,
            modality_consistency: false,
            modality_similarity: false,
            code_consistency: false,
        };
        let models: Models<f32> = Models::new(&cfg.nets, cfg.dims_tuple(), 8).unwrap();
        let mut opt = AdamState::new(&models);
        let subjects = tiny_subjects(2);
        let batch = TrainingBatch { subjects: [&subjects[0], &subjects[1]] };
        let report = train_step(&models, &batch, &cfg, &mut opt).unwrap();
        assert_eq!(report.restoration, 0.0);
        assert_eq!(report.code_consistency, 0.0);
        assert!((report.total - cfg.weights.lambda_rec * report.reconstruction).abs() < 1e-9);
    }

    #[test]
    fn rest_only_leaves_anatomy_extractor_untouched() {
        let mut cfg = tiny_cfg();
        cfg.loss_toggles = LossToggles {
            reconstruction: false,
            restoration: true,
            anatomy_consistency: false,
            anatomy_similarity: false,
            modality_consistency: false,
            modality_similarity: false,
            code_consistency: false,
        };
        let models: Models<f32> = Models::new(&cfg.nets, cfg.dims_tuple(), 9).unwrap();
        let mut opt = AdamState::new(&models);
        let subjects = tiny_subjects(2);
        let batch = TrainingBatch { subjects: [&subjects[0], &subjects[1]] };
        train_step(&models, &batch, &cfg, &mut opt).unwrap();
        for p in models.params.iter() {
            let pb = p.borrow();
            if pb.name.starts_with("ea.") {
                assert!(
                    pb.grad.iter().all(|&g| g == 0.0),
                    "{} received gradient through the edge path",
                    pb.name
                );
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_resumes_bit_compatibly() {
        let cfg = tiny_cfg();
        let models: Models<f32> = Models::new(&cfg.nets, cfg.dims_tuple(), 10).unwrap();
        let mut opt = AdamState::new(&models);
        let subjects = tiny_subjects(3);
        let b1 = TrainingBatch { subjects: [&subjects[0], &subjects[1]] };
        let b2 = TrainingBatch { subjects: [&subjects[1], &subjects[2]] };
        train_step(&models, &b1, &cfg, &mut opt).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("t.ckpt");
        checkpoint_save(&models, &opt, &ckpt).unwrap();
        let direct = train_step(&models, &b2, &cfg, &mut opt).unwrap();

        let resumed: Models<f32> = Models::new(&cfg.nets, cfg.dims_tuple(), 999).unwrap();
        let mut opt2 = AdamState::new(&resumed);
        checkpoint_load(&resumed, &mut opt2, &ckpt).unwrap();
        assert_eq!(opt2.step, 1);
        let replayed = train_step(&resumed, &b2, &cfg, &mut opt2).unwrap();
        assert!((direct.total - replayed.total).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_into_mismatched_architecture_fails() {
        let cfg = tiny_cfg();
        let models: Models<f32> = Models::new(&cfg.nets, cfg.dims_tuple(), 11).unwrap();
        let opt = AdamState::new(&models);
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("t.ckpt");
        checkpoint_save(&models, &opt, &ckpt).unwrap();
        let mut other_nets = cfg.nets.clone();
        other_nets.ea_base_channels = 3;
        let other: Models<f32> = Models::new(&other_nets, cfg.dims_tuple(), 12).unwrap();
        let mut opt2 = AdamState::new(&other);
        assert!(matches!(
            checkpoint_load(&other, &mut opt2, &ckpt),
            Err(TrainError::Checkpoint(CheckpointError::ShapeMismatch { .. }))
        ));
    }
}
