//! Command-line front end wiring the pipeline into reproducible workflows:
//! dataset generation, intensity standardization, joint training, detection,
//! evaluation, hyperparameter search, and slice export.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use config::RunConfig;
use voxad_core::anomaly::{
    binarize_optimal, postprocess, score_volume, ScoreConfig, ScoredVolume,
};
use voxad_core::manifest::{DatasetManifest, Role};
use voxad_core::metrics::{average_precision, binarize, dataset_dice, region_l1_errors, EvalRecord};
use voxad_core::nets::Models;
use voxad_core::phantom::generate_dataset;
use voxad_core::prep::{clip_scale, compute_landmarks, match_histogram, LandmarkProfile};
use voxad_core::trainer::{
    checkpoint_save, load_subjects, model_load, train, validate_ap, AdamState, StepReport,
    SubjectData, TrainConfig,
};
use voxad_core::vol::io::{export_slice, load_volume, save_mask, save_volume};
use voxad_core::vol::{MaskVolume, SliceAxis, Volume};

#[derive(Parser)]
#[command(name = "voxad", version, about = "Voxel-level anomaly detection in 3D volumes")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Force fully serial execution. Execution is serial by design, so this
    /// only pins the contract for reproducibility scripting.
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram-match a dataset against landmark profiles and rescale.
    Prep {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory with existing profile_m*.json files; computed from the
        /// manifest's healthy subjects (and written to --out) when omitted.
        #[arg(long)]
        profile_dir: Option<PathBuf>,
    },
    /// Jointly train the five networks on a dataset's healthy subjects.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore volumes, score them, and write maps plus binary masks.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Binarization threshold; searched (with truths) or taken from the
        /// in-brain score distribution when omitted.
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Score an abnormal dataset and write the metrics CSV.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search margins, post-processing kernels, or loss weights.
    Search {
        #[arg(long, value_enum)]
        kind: SearchKind,
        #[arg(long)]
        manifest: PathBuf,
        /// Trained model (required for the kernel search).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export inspection slices (input, restoration, anomaly map) as PGM.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, default_value = "axial")]
        axis: String,
        /// Slice index; the middle slice when omitted.
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SearchKind {
    Margins,
    Kernels,
    Weights,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, &out),
        Command::Prep { manifest, out, profile_dir } => {
            prep(&cfg, &manifest, &out, profile_dir.as_deref())
        }
        Command::Train { manifest, out } => do_train(&cfg, &manifest, &out),
        Command::Detect { model, manifest, volume, out, threshold } => {
            detect(&cfg, &model, manifest.as_deref(), volume.as_deref(), &out, threshold)
        }
        Command::Evaluate { model, manifest, out } => evaluate(&cfg, &model, &manifest, &out),
        Command::Search { kind, manifest, model, out } => {
            search(&cfg, kind, &manifest, model.as_deref(), &out)
        }
        Command::Export { model, volume, axis, index, out } => {
            export(&cfg, &model, &volume, &axis, index, &out)
        }
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = generate_dataset(
        cfg.data.n_healthy,
        cfg.data.n_abnormal,
        &cfg.data.phantom,
        &cfg.data.lesions,
        cfg.seed,
        out,
    )?;
    println!(
        "wrote {} subjects ({} healthy, {} abnormal) to {}",
        manifest.subjects.len(),
        cfg.data.n_healthy,
        cfg.data.n_abnormal,
        out.display()
    );
    Ok(())
}

fn prep(cfg: &RunConfig, manifest_path: &Path, out: &Path, profile_dir: Option<&Path>) -> Result<()> {
    let (manifest, dir) = DatasetManifest::load(manifest_path)?;
    std::fs::create_dir_all(out)?;
    let k = manifest.modalities.len();
    // one landmark profile per modality
    let mut profiles = Vec::with_capacity(k);
    for m in 0..k {
        let profile = match profile_dir {
            Some(pd) => LandmarkProfile::load(pd.join(format!("profile_m{}.json", m + 1)))?,
            None => {
                let mut reference = Vec::new();
                for entry in manifest.healthy() {
                    reference.push(entry.load_volumes(&dir)?.swap_remove(m));
                }
                if reference.is_empty() {
                    bail!("manifest has no healthy subjects to derive a profile from");
                }
                let p = compute_landmarks(&reference, &cfg.prep.percentiles, cfg.prep.mask_aware)?;
                p.save(out.join(format!("profile_m{}.json", m + 1)))?;
                p
            }
        };
        profiles.push(profile);
    }
    for entry in &manifest.subjects {
        let volumes = entry.load_volumes(&dir)?;
        for (m, v) in volumes.iter().enumerate() {
            let matched = match_histogram(v, &profiles[m])?;
            let scaled = clip_scale(&matched, cfg.prep.scale)?;
            save_volume(&scaled, out.join(&entry.volumes[m]))?;
        }
        if let (Some(t), Some(name)) = (entry.load_truth(&dir)?, entry.truth.as_ref()) {
            save_mask(&t, out.join(name))?;
        }
    }
    manifest.save(out.join("manifest.json"))?;
    println!("standardized {} subjects into {}", manifest.subjects.len(), out.display());
    Ok(())
}

fn models_for(cfg: &RunConfig, dims: (usize, usize, usize)) -> Result<Models<f32>> {
    Ok(Models::new(&cfg.train.nets, dims, cfg.seed)?)
}

fn do_train(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let (manifest, dir) = DatasetManifest::load(manifest_path)?;
    std::fs::create_dir_all(out)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.dims = manifest.dims;
    train_cfg.modalities = manifest.modalities.len();
    let training_set = load_subjects(&manifest, &dir, Role::Healthy)?;
    let validation_set = load_subjects(&manifest, &dir, Role::Abnormal)?;
    let models = models_for(cfg, train_cfg.dims_tuple())?;
    let mut opt = AdamState::new(&models);
    let validation = if validation_set.is_empty() {
        None
    } else {
        Some((validation_set.as_slice(), &cfg.score))
    };
    let outcome = train(&models, &mut opt, &training_set, &train_cfg, validation)?;

    let mut log = String::from(StepReport::CSV_HEADER);
    log.push('\n');
    for r in &outcome.reports {
        log.push_str(&r.csv_row());
        log.push('\n');
    }
    std::fs::write(out.join("train_log.csv"), log)?;
    checkpoint_save(&models, &opt, out.join("model.ckpt"))?;
    let summary = serde_json::json!({
        "steps": outcome.reports.len(),
        "final_total": outcome.reports.last().map(|r| r.total),
        "validations": outcome.validations,
        "best_epoch": outcome.best_epoch,
    });
    std::fs::write(out.join("training_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "trained {} steps; model and log written to {}",
        outcome.reports.len(),
        out.display()
    );
    Ok(())
}

/// Load a model checkpoint into freshly built models for `dims`.
fn load_models(cfg: &RunConfig, dims: (usize, usize, usize), ckpt: &Path) -> Result<Models<f32>> {
    let models = models_for(cfg, dims)?;
    model_load(&models, ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok(models)
}

/// Fallback detect threshold without ground truth: a high quantile of the
/// in-brain post-processed scores.
fn quantile_threshold(scored: &[(String, ScoredVolume)]) -> f32 {
    let mut pool: Vec<f32> = Vec::new();
    for (_, s) in scored {
        for i in 0..s.map.len() {
            if s.brain.voxels()[i] == 1 {
                pool.push(s.map.voxels()[i]);
            }
        }
    }
    if pool.is_empty() {
        return 0.0;
    }
    pool.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    pool[((pool.len() - 1) as f64 * 0.995) as usize]
}

fn detect(
    cfg: &RunConfig,
    model: &Path,
    manifest: Option<&Path>,
    volume: Option<&Path>,
    out: &Path,
    threshold: Option<f32>,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut targets: Vec<(String, Volume, Option<MaskVolume>)> = Vec::new();
    match (manifest, volume) {
        (Some(mpath), None) => {
            let (manifest, dir) = DatasetManifest::load(mpath)?;
            for entry in &manifest.subjects {
                let vols = entry.load_volumes(&dir)?;
                let truth = entry.load_truth(&dir)?;
                for (m, v) in vols.into_iter().enumerate() {
                    targets.push((format!("{}_m{}", entry.id, m + 1), v, truth.clone()));
                }
            }
        }
        (None, Some(vpath)) => {
            let stem = vpath.file_stem().and_then(|s| s.to_str()).unwrap_or("volume").to_string();
            targets.push((stem, load_volume(vpath)?, None));
        }
        _ => bail!("detect needs exactly one of --manifest or --volume"),
    }
    if targets.is_empty() {
        bail!("nothing to detect");
    }
    let dims = targets[0].1.dims();
    let models = load_models(cfg, dims, model)?;
    let mut scored: Vec<(String, ScoredVolume)> = Vec::new();
    for (name, v, _) in &targets {
        scored.push((name.clone(), score_volume(&models, &cfg.train.toggles, &cfg.score, v)?));
    }
    // threshold: explicit, else searched over the targets with truths,
    // else a high in-brain quantile
    let with_truth: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].2.is_some()).collect();
    let (thr, thr_source) = match threshold {
        Some(t) => (t, "explicit"),
        None if !with_truth.is_empty() => {
            let maps: Vec<Volume> = with_truth.iter().map(|&i| scored[i].1.map.clone()).collect();
            let ts: Vec<MaskVolume> =
                with_truth.iter().map(|&i| targets[i].2.clone().unwrap()).collect();
            let r = binarize_optimal(&maps, &ts, &cfg.score, false)?;
            (r.threshold, "greedy-dice-search")
        }
        None => (quantile_threshold(&scored), "in-brain-quantile-0.995"),
    };
    for (name, s) in &scored {
        save_volume(&s.restored, out.join(format!("{name}_restored.vv1")))?;
        save_volume(&s.raw, out.join(format!("{name}_score_raw.vv1")))?;
        save_volume(&s.map, out.join(format!("{name}_score.vv1")))?;
        save_mask(&binarize(&s.map, thr), out.join(format!("{name}_mask.vv1")))?;
    }
    let sidecar = serde_json::json!({
        "threshold": thr,
        "threshold_source": thr_source,
        "score": cfg.score,
        "toggles": cfg.train.toggles,
        "model": model.display().to_string(),
        "subjects": scored.len(),
    });
    std::fs::write(out.join("detect.json"), serde_json::to_string_pretty(&sidecar)?)?;
    println!("detected {} volumes; outputs in {}", scored.len(), out.display());
    Ok(())
}

pub const METRICS_CSV_HEADER: &str = "dataset,modality,ap,dsc,threshold,l1_re_n,l1_re_a,l1_ratio";

fn evaluate(cfg: &RunConfig, model: &Path, manifest_path: &Path, out: &Path) -> Result<()> {
    let (manifest, dir) = DatasetManifest::load(manifest_path)?;
    let abnormal = load_subjects(&manifest, &dir, Role::Abnormal)?;
    if abnormal.is_empty() {
        bail!("manifest has no abnormal subjects to evaluate");
    }
    let dims = (manifest.dims[0], manifest.dims[1], manifest.dims[2]);
    let models = load_models(cfg, dims, model)?;
    let dataset_name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    for (m, modality) in manifest.modalities.iter().enumerate() {
        let mut records = Vec::new();
        let mut restorations = Vec::new();
        for s in &abnormal {
            let scored = score_volume(&models, &cfg.train.toggles, &cfg.score, &s.volumes[m])?;
            restorations.push(scored.restored.clone());
            records.push(EvalRecord {
                subject: s.id.clone(),
                modality: modality.clone(),
                map: scored.map,
                truth: s
                    .truth
                    .clone()
                    .ok_or_else(|| anyhow!("abnormal subject {} lacks a truth mask", s.id))?,
                brain: scored.brain,
            });
        }
        let ap = average_precision(&records)?;
        let maps: Vec<Volume> = records.iter().map(|r| r.map.clone()).collect();
        let truths: Vec<MaskVolume> = records.iter().map(|r| r.truth.clone()).collect();
        let bin = binarize_optimal(&maps, &truths, &cfg.score, false)?;
        let dsc = dataset_dice(&records, bin.threshold)?;
        // aggregate region errors subject-wise, ratio of the aggregates
        let mut sum_n = 0.0;
        let mut sum_a = 0.0;
        for (s, xr) in abnormal.iter().zip(restorations.iter()) {
            let rep = region_l1_errors(&s.volumes[m], xr, s.truth.as_ref().unwrap(), &s.brain)?;
            sum_n += rep.l1_re_n;
            sum_a += rep.l1_re_a;
        }
        let l1_re_n = sum_n / abnormal.len() as f64;
        let l1_re_a = sum_a / abnormal.len() as f64;
        let l1_ratio = if l1_re_n > 0.0 { l1_re_a / l1_re_n } else { f64::NAN };
        csv.push_str(&format!(
            "{dataset_name},{modality},{ap},{dsc},{},{l1_re_n},{l1_re_a},{l1_ratio}\n",
            bin.threshold
        ));
    }
    std::fs::write(out, &csv)?;
    println!("metrics written to {}", out.display());
    Ok(())
}

fn search(
    cfg: &RunConfig,
    kind: SearchKind,
    manifest_path: &Path,
    model: Option<&Path>,
    out: &Path,
) -> Result<()> {
    use voxad_core::trainer::search::grid_search;
    let (manifest, dir) = DatasetManifest::load(manifest_path)?;
    let abnormal = load_subjects(&manifest, &dir, Role::Abnormal)?;
    if abnormal.is_empty() {
        bail!("search needs abnormal subjects with truths as its objective");
    }
    let dims = (manifest.dims[0], manifest.dims[1], manifest.dims[2]);
    let mut train_cfg = cfg.train.clone();
    train_cfg.dims = manifest.dims;
    train_cfg.modalities = manifest.modalities.len();
    if cfg.search.epochs > 0 {
        train_cfg.epochs = cfg.search.epochs;
    }

    let mean_ap = |models: &Models<f32>, score: &ScoreConfig, abn: &[SubjectData]| -> Result<f64> {
        let aps = validate_ap(models, &train_cfg.toggles, score, abn)?;
        Ok(aps.iter().sum::<f64>() / aps.len() as f64)
    };

    let retrain_objective = |tc: TrainConfig| -> Result<f64> {
        let training_set = load_subjects(&manifest, &dir, Role::Healthy)?;
        let models = Models::new(&tc.nets, tc.dims_tuple(), cfg.seed)?;
        let mut opt = AdamState::new(&models);
        train(&models, &mut opt, &training_set, &tc, None)?;
        mean_ap(&models, &cfg.score, &abnormal)
    };

    let result = match kind {
        SearchKind::Margins => {
            let axes = vec![
                ("alpha_a".to_string(), cfg.search.margin_grid.clone()),
                ("alpha_m".to_string(), cfg.search.margin_grid.clone()),
            ];
            grid_search(&axes, |point| {
                let mut tc = train_cfg.clone();
                tc.margins.alpha_a = point.get("alpha_a").unwrap();
                tc.margins.alpha_m = point.get("alpha_m").unwrap();
                retrain_objective(tc)
            })?
        }
        SearchKind::Weights => {
            let axes = vec![
                ("lambda_a".to_string(), cfg.search.weight_grid.clone()),
                ("lambda_m".to_string(), cfg.search.weight_grid.clone()),
                ("lambda_ae".to_string(), cfg.search.weight_grid.clone()),
            ];
            grid_search(&axes, |point| {
                let mut tc = train_cfg.clone();
                tc.weights.lambda_rec = 1.0;
                tc.weights.lambda_a = point.get("lambda_a").unwrap();
                tc.weights.lambda_m = point.get("lambda_m").unwrap();
                tc.weights.lambda_ae = point.get("lambda_ae").unwrap();
                retrain_objective(tc)
            })?
        }
        SearchKind::Kernels => {
            let ckpt = model.ok_or_else(|| anyhow!("--model is required for the kernel search"))?;
            let models = load_models(cfg, dims, ckpt)?;
            // raw maps are kernel-independent: score once, post-process per point
            let mut raw: Vec<(usize, ScoredVolume, MaskVolume)> = Vec::new();
            for s in &abnormal {
                for m in 0..manifest.modalities.len() {
                    let base = ScoreConfig {
                        min_kernel: 0,
                        mean_kernel: 0,
                        erosion_kernel: 0,
                        ..cfg.score.clone()
                    };
                    let scored = score_volume(&models, &train_cfg.toggles, &base, &s.volumes[m])?;
                    raw.push((m, scored, s.truth.clone().unwrap()));
                }
            }
            let axes = vec![
                ("min_kernel".to_string(), cfg.search.min_kernel_grid.clone()),
                ("mean_kernel".to_string(), cfg.search.mean_kernel_grid.clone()),
            ];
            grid_search(&axes, |point| -> Result<f64> {
                let sc = ScoreConfig {
                    min_kernel: point.get("min_kernel").unwrap() as usize,
                    mean_kernel: point.get("mean_kernel").unwrap() as usize,
                    ..cfg.score.clone()
                };
                let k = manifest.modalities.len();
                let mut aps = Vec::with_capacity(k);
                for m in 0..k {
                    let records: Vec<EvalRecord> = raw
                        .iter()
                        .filter(|(mm, _, _)| *mm == m)
                        .map(|(_, s, truth)| -> Result<EvalRecord> {
                            Ok(EvalRecord {
                                subject: String::new(),
                                modality: format!("m{}", m + 1),
                                map: postprocess(&s.raw, &s.brain, &sc)?,
                                truth: truth.clone(),
                                brain: s.brain.clone(),
                            })
                        })
                        .collect::<Result<_>>()?;
                    aps.push(average_precision(&records)?);
                }
                Ok(aps.iter().sum::<f64>() / aps.len() as f64)
            })?
        }
    };
    let result = result.map_err(|e| anyhow!("{e}"))?;
    let axis_names: Vec<String> = result.best.values.iter().map(|(n, _)| n.clone()).collect();
    let mut csv = axis_names.join(",");
    csv.push_str(",objective\n");
    for (point, value) in &result.table {
        let row: Vec<String> = point.values.iter().map(|(_, v)| v.to_string()).collect();
        csv.push_str(&row.join(","));
        csv.push_str(&format!(",{value}\n"));
    }
    std::fs::write(out, &csv)?;
    let best: Vec<String> = result.best.values.iter().map(|(n, v)| format!("{n}={v}")).collect();
    println!(
        "searched {} points; best {} with objective {:.6}; table in {}",
        result.table.len(),
        best.join(", "),
        result.best_value,
        out.display()
    );
    Ok(())
}

fn export(
    cfg: &RunConfig,
    model: &Path,
    volume: &Path,
    axis: &str,
    index: Option<usize>,
    out: &Path,
) -> Result<()> {
    let axis = SliceAxis::parse(axis).ok_or_else(|| anyhow!("axis must be axial, coronal or sagittal"))?;
    let v = load_volume(volume)?;
    let models = load_models(cfg, v.dims(), model)?;
    let scored = score_volume(&models, &cfg.train.toggles, &cfg.score, &v)?;
    let (dd, hh, ww) = v.dims();
    let extent = match axis {
        SliceAxis::Axial => dd,
        SliceAxis::Coronal => hh,
        SliceAxis::Sagittal => ww,
    };
    let index = index.unwrap_or(extent / 2);
    std::fs::create_dir_all(out)?;
    let stem = volume.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    export_slice(&v, axis, index, out.join(format!("{stem}_input.pgm")))?;
    export_slice(&scored.restored, axis, index, out.join(format!("{stem}_restored.pgm")))?;
    export_slice(&scored.map, axis, index, out.join(format!("{stem}_anomaly.pgm")))?;
    println!("exported 3 slices to {}", out.display());
    Ok(())
}
