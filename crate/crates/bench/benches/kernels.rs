//! Criterion benchmarks for the hot kernels: 3D convolution (forward and
//! backward), the post-processing filters, windowed SSIM, and one full
//! training step at desk scale.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use voxad_core::autodiff::conv::{conv3d_backward, conv3d_forward, conv3d_out_shape};
use voxad_core::nets::Models;
use voxad_core::phantom::{generate_subject, PhantomSpec};
use voxad_core::ssim::{ssim_map, SsimParams};
use voxad_core::trainer::{train_step, AdamState, SubjectData, TrainConfig, TrainingBatch};
use voxad_core::vol::{mean_filter, min_filter, KernelSpec, Volume};

type ConvFixture = (Vec<f32>, Vec<usize>, Vec<f32>, Vec<usize>, Vec<f32>, Vec<usize>);

fn conv_fixture() -> ConvFixture {
    let ishape = vec![1usize, 16, 24, 24, 24];
    let wshape = vec![8usize, 16, 3, 3, 3];
    let input: Vec<f32> = (0..ishape.iter().product::<usize>())
        .map(|i| (i as f32 * 0.001).sin())
        .collect();
    let weight: Vec<f32> = (0..wshape.iter().product::<usize>())
        .map(|i| (i as f32 * 0.01).cos() * 0.1)
        .collect();
    let bias = vec![0.0f32; 8];
    let oshape = conv3d_out_shape(&ishape, &wshape, &[8], 1, 1).unwrap();
    (input, ishape, weight, wshape, bias, oshape)
}

fn bench_conv3d(c: &mut Criterion) {
    let (input, ishape, weight, wshape, bias, oshape) = conv_fixture();
    c.bench_function("conv3d_forward_16to8_24cubed", |b| {
        b.iter(|| {
            conv3d_forward(
                black_box(&input),
                &ishape,
                black_box(&weight),
                &wshape,
                &bias,
                1,
                1,
                &oshape,
            )
        })
    });
    let gout = vec![1.0f32; oshape.iter().product()];
    c.bench_function("conv3d_backward_16to8_24cubed", |b| {
        b.iter(|| {
            conv3d_backward(
                black_box(&input),
                &ishape,
                black_box(&weight),
                &wshape,
                black_box(&gout),
                &oshape,
                1,
                1,
            )
        })
    });
}

fn bench_filters(c: &mut Criterion) {
    let v = Volume::from_fn((24, 24, 24), |d, h, w| ((d * 7 + h * 3 + w) % 23) as f32 / 23.0);
    c.bench_function("mean_filter_9cubed_24cubed", |b| {
        b.iter(|| mean_filter(black_box(&v), &KernelSpec::mean(9)).unwrap())
    });
    c.bench_function("min_filter_3cubed_24cubed", |b| {
        b.iter(|| min_filter(black_box(&v), &KernelSpec::minimum(3)).unwrap())
    });
}

fn bench_ssim(c: &mut Criterion) {
    let a = Volume::from_fn((24, 24, 24), |d, h, w| ((d + h + w) % 11) as f32 / 11.0);
    let b2 = Volume::from_fn((24, 24, 24), |d, h, w| ((d * 2 + h + w) % 13) as f32 / 13.0);
    let params = SsimParams::default();
    c.bench_function("ssim_map_11cubed_window_24cubed", |b| {
        b.iter(|| ssim_map(black_box(&a), black_box(&b2), &params).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let spec = PhantomSpec::default();
    let subjects: Vec<SubjectData> = (0..2)
        .map(|i| {
            let s = generate_subject(&spec, None, 42, i).unwrap();
            SubjectData { id: s.id, brain: s.brain, volumes: s.volumes, truth: s.truth }
        })
        .collect();
    let cfg = TrainConfig::default();
    let models: Models<f32> = Models::new(&cfg.nets, cfg.dims_tuple(), 1).unwrap();
    let mut opt = AdamState::new(&models);
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train_step_24cubed_default_nets", |b| {
        b.iter(|| {
            let batch = TrainingBatch { subjects: [&subjects[0], &subjects[1]] };
            train_step(&models, &batch, &cfg, &mut opt).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_conv3d, bench_filters, bench_ssim, bench_train_step);
criterion_main!(benches);
