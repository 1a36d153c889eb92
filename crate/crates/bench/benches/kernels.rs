use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slamp::data::{generate_dataset, synthetic_digits};
use slamp::graph::Graph;
use slamp::loss::recon_l2_var;
use slamp::rollout::{generate, BatchFrames, Trainer};
use slamp::warp::inverse_warp;
use slamp::{ExperimentConfig, Model, Tensor};

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn warp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = uniform(&mut rng, &[16, 1, 64, 64], 0.0, 1.0);
    let flow = uniform(&mut rng, &[16, 2, 64, 64], -4.0, 4.0);
    c.bench_function("inverse_warp 16x64x64", |b| {
        b.iter(|| inverse_warp(black_box(&image), black_box(&flow)).unwrap())
    });
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = uniform(&mut rng, &[16, 8, 32, 32], -1.0, 1.0);
    let w = uniform(&mut rng, &[16, 8, 4, 4], -0.1, 0.1);
    c.bench_function("conv2d fwd+bwd 16x8x32x32 k4 s2", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let xv = g.variable(x.clone());
            let wv = g.variable(w.clone());
            let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
            let zero = g.input(Tensor::zeros(&[16, 16, 16, 16]));
            let loss = recon_l2_var(&mut g, y, zero).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn desk(c: &mut Criterion) {
    let cfg = ExperimentConfig::desk();
    let digits = synthetic_digits(50, 28, 0).unwrap();
    let videos = generate_dataset(&cfg.data.generator, &digits, 32, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::<f32>::new(cfg.model.clone(), &mut rng).unwrap();

    let mut group = c.benchmark_group("desk");
    group.sample_size(10);
    group.bench_function("train update b8", |b| {
        b.iter_batched(
            || Trainer::new(model.clone(), cfg.train.optimizer.clone()),
            |mut t| t.update(&videos, &cfg.rollout, &cfg.train).unwrap(),
            BatchSize::LargeInput,
        )
    });
    let clip = videos[0].window(0, cfg.rollout.frames()).unwrap();
    let batch = BatchFrames::<f32>::repeat(&clip, 10).unwrap();
    group.bench_function("generate 10 samples", |b| {
        b.iter(|| {
            let mut rngs: Vec<ChaCha8Rng> = (0..10).map(ChaCha8Rng::seed_from_u64).collect();
            generate(&model, &batch, &cfg.rollout, &mut rngs).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, warp, conv, desk);
criterion_main!(benches);
