// Calibration probe for the healthy-restoration improvement example:
// prints trained vs untrained in-brain |x - x_r| at step checkpoints.
use voxad_core::anomaly::{reconstruct_phi, PipelineToggles};
use voxad_core::nets::Models;
use voxad_core::phantom::{generate_subject, PhantomSpec};
use voxad_core::trainer::{sample_pair_batch, train_step, AdamState, SubjectData, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn subjects(spec: &PhantomSpec, seed: u64, n: usize) -> Vec<SubjectData> {
    (0..n)
        .map(|i| {
            let s = generate_subject(spec, None, seed, i).unwrap();
            SubjectData { id: s.id, brain: s.brain, volumes: s.volumes, truth: s.truth }
        })
        .collect()
}

fn healthy_error(models: &Models<f32>, subjects: &[SubjectData]) -> f64 {
    let toggles = PipelineToggles::default();
    let mut acc = 0.0;
    let mut n = 0usize;
    for s in subjects {
        for v in &s.volumes {
            let xr = reconstruct_phi(models, &toggles, v).unwrap();
            let mut err = 0.0;
            let mut c = 0usize;
            for i in 0..v.len() {
                if s.brain.voxels()[i] == 1 {
                    err += (v.voxels()[i] - xr.voxels()[i]).abs() as f64;
                    c += 1;
                }
            }
            acc += err / c as f64;
            n += 1;
        }
    }
    acc / n as f64
}

fn main() {
    let smooth: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let noise: f32 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let spec = PhantomSpec {
        dims: [16, 16, 16],
        smooth_kernel: smooth,
        noise_sigma: noise,
        bias_amplitude: 0.05,
        ..PhantomSpec::default()
    };
    let train_set = subjects(&spec, 500, 6);
    let held_out = subjects(&spec, 501, 2);
    let cfg = TrainConfig { dims: [16, 16, 16], learning_rate: 1e-3, seed: 42, ..TrainConfig::default() };
    let models: Models<f32> = Models::new(&cfg.nets, cfg.dims_tuple(), 42).unwrap();
    let untrained: Models<f32> = Models::new(&cfg.nets, cfg.dims_tuple(), 42).unwrap();
    let base = healthy_error(&untrained, &held_out);
    println!("untrained baseline {base:.4} (smooth {smooth}, noise {noise})");
    let mut opt = AdamState::new(&models);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut reports = Vec::new();
    for step in 1..=400usize {
        let batch = sample_pair_batch(&train_set, &mut rng).unwrap();
        reports.push(train_step(&models, &batch, &cfg, &mut opt).unwrap());
        if step % 100 == 0 {
            let e = healthy_error(&models, &held_out);
            println!(
                "step {step}: loss {:.3}, healthy err {e:.4} (ratio {:.3})",
                reports.last().unwrap().total,
                e / base
            );
        }
    }
}
