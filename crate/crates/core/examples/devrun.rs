// Dress rehearsal of the acceptance benchmark: three seeds, full and
// no-edge-restoration variants, three score kinds, modality-reuse probe.
use std::time::Instant;

use voxad_core::anomaly::{
    binarize_optimal, score_volume, PipelineToggles, ScoreConfig, ScoreKind,
};
use voxad_core::metrics::{average_precision, dataset_dice, region_l1_errors, EvalRecord};
use voxad_core::nets::Models;
use voxad_core::phantom::{generate_subject, LesionConfig, PhantomSpec};
use voxad_core::ssim::{mean_ssim, SsimParams};
use voxad_core::trainer::{train, AdamState, SubjectData, TrainConfig};

fn subjects(
    spec: &PhantomSpec,
    lesions: Option<&LesionConfig>,
    seed: u64,
    idx: std::ops::Range<usize>,
) -> Vec<SubjectData> {
    idx.map(|i| {
        let s = generate_subject(spec, lesions, seed, i).unwrap();
        SubjectData { id: s.id, brain: s.brain, volumes: s.volumes, truth: s.truth }
    })
    .collect()
}

fn spec() -> PhantomSpec {
    PhantomSpec::default()
}

fn lesions() -> LesionConfig {
    LesionConfig { radius_range: [3.0, 5.0], ..LesionConfig::default() }
}

fn bench_score() -> ScoreConfig {
    ScoreConfig { min_kernel: 0, mean_kernel: 5, ..ScoreConfig::default() }
}

fn eval(
    models: &Models<f32>,
    toggles: &PipelineToggles,
    score: &ScoreConfig,
    test: &[SubjectData],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = test[0].volumes.len();
    let mut aps = Vec::new();
    let mut dscs = Vec::new();
    let mut ratios = Vec::new();
    for m in 0..k {
        let mut records = Vec::new();
        let mut rs = Vec::new();
        for s in test {
            let sc = score_volume(models, toggles, score, &s.volumes[m]).unwrap();
            rs.push(sc.restored.clone());
            records.push(EvalRecord {
                subject: s.id.clone(),
                modality: format!("m{}", m + 1),
                map: sc.map,
                truth: s.truth.clone().unwrap(),
                brain: sc.brain,
            });
        }
        aps.push(average_precision(&records).unwrap());
        let maps: Vec<_> = records.iter().map(|r| r.map.clone()).collect();
        let truths: Vec<_> = records.iter().map(|r| r.truth.clone()).collect();
        let bin = binarize_optimal(&maps, &truths, score, false).unwrap();
        dscs.push(dataset_dice(&records, bin.threshold).unwrap());
        let mut sn = 0.0;
        let mut sa = 0.0;
        for (s, xr) in test.iter().zip(rs.iter()) {
            let rep = region_l1_errors(&s.volumes[m], xr, s.truth.as_ref().unwrap(), &s.brain).unwrap();
            sn += rep.l1_re_n;
            sa += rep.l1_re_a;
        }
        ratios.push(sa / sn);
    }
    (aps, dscs, ratios)
}

fn main() {
    let t0 = Instant::now();
    let spec = spec();
    let lesions = lesions();
    let train_set = subjects(&spec, None, 7001, 0..32);
    let val_set = subjects(&spec, Some(&lesions), 7002, 100..108);
    let test_set = subjects(&spec, Some(&lesions), 7003, 200..216);
    let healthy_probe = subjects(&spec, None, 7004, 300..304);
    let score = bench_score();
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let mut prev_n = 0usize;
    let mut prev_d = 0usize;
    for s in &test_set {
        prev_n += s.truth.as_ref().unwrap().count();
        prev_d += s.brain.count();
    }
    let prevalence = prev_n as f64 / prev_d as f64;
    println!("prevalence {prevalence:.4}, 5x bar {:.4}", 5.0 * prevalence);

    for seed in [1u64, 2, 3] {
        let cfg = TrainConfig { epochs, learning_rate: lr, seed, validate_every: 3, ..TrainConfig::default() };
        let t1 = Instant::now();
        let models: Models<f32> = Models::new(&cfg.nets, cfg.dims_tuple(), seed).unwrap();
        let mut opt = AdamState::new(&models);
        let out = train(&models, &mut opt, &train_set, &cfg, Some((&val_set, &score))).unwrap();
        let train_time = t1.elapsed().as_secs_f64();

        let (aps, dscs, ratios) = eval(&models, &cfg.toggles, &score, &test_set);
        println!(
            "seed {seed} FULL: {:.0}s best_epoch {:?} AP {:?} DSC {:?} ratio {:?}",
            train_time, out.best_epoch, aps, dscs, ratios
        );
        for kind in [ScoreKind::L1, ScoreKind::Ssim] {
            let sc = ScoreConfig { kind, ..score.clone() };
            let (aps_k, _, _) = eval(&models, &cfg.toggles, &sc, &test_set);
            println!("  seed {seed} kind {kind:?}: AP {:?}", aps_k);
        }
        // modality reuse probe: healthy-input SSIM with and without reuse
        {
            let with = PipelineToggles::default();
            let without = PipelineToggles { use_modality_reuse: false, ..with };
            let params = SsimParams::default();
            let mut s_with = 0.0;
            let mut s_without = 0.0;
            let mut n = 0;
            for s in &healthy_probe {
                for v in &s.volumes {
                    let a = score_volume(&models, &with, &score, v).unwrap().restored;
                    let b = score_volume(&models, &without, &score, v).unwrap().restored;
                    s_with += mean_ssim(v, &a, &params).unwrap();
                    s_without += mean_ssim(v, &b, &params).unwrap();
                    n += 1;
                }
            }
            println!(
                "  seed {seed} reuse SSIM: with {:.4} without {:.4}",
                s_with / n as f64,
                s_without / n as f64
            );
        }
        // no-edge-restoration variant
        let t2 = Instant::now();
        let toggles_ne = PipelineToggles { use_edge_restoration: false, ..PipelineToggles::default() };
        let cfg_ne = TrainConfig { toggles: toggles_ne, ..cfg.clone() };
        let models_ne: Models<f32> = Models::new(&cfg_ne.nets, cfg_ne.dims_tuple(), seed).unwrap();
        let mut opt_ne = AdamState::new(&models_ne);
        train(&models_ne, &mut opt_ne, &train_set, &cfg_ne, Some((&val_set, &score))).unwrap();
        let (aps_ne, dscs_ne, _) = eval(&models_ne, &toggles_ne, &score, &test_set);
        println!(
            "  seed {seed} NO-EDGE: {:.0}s AP {:?} DSC {:?}",
            t2.elapsed().as_secs_f64(),
            aps_ne,
            dscs_ne
        );
    }
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
}
