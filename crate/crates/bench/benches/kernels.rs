use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spectral_forecaster::layers::ForwardCtx;
use spectral_forecaster::model::{FilterFormer, Forecaster, ModelConfig};
use spectral_forecaster::numeric::{RealFft, Tape, Tensor};
use spectral_forecaster::spectral::apply_filter;
use spectral_forecaster::stream_rng;

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn rfft(c: &mut Criterion) {
    let mut group = c.benchmark_group("rfft");
    // powers of two take the radix-2 path, the rest go through Bluestein
    for n in [64, 96, 128, 336, 1024] {
        let plan = RealFft::new(n).unwrap();
        let x = random(n, n as u64);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| {
            b.iter(|| plan.forward(black_box(x)).unwrap())
        });
    }
    group.finish();
}

fn filter(c: &mut Criterion) {
    let mut group = c.benchmark_group("apply_filter");
    for n in [16, 64, 128] {
        let w = random(n, 1);
        let y = random(n, 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| apply_filter(black_box(&w), black_box(&y)).unwrap())
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("filterformer");
    group.sample_size(10);
    let cfg = ModelConfig {
        d_model: 64,
        total_layers: 3,
        alpha: 1,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = FilterFormer::new(cfg.clone(), 0).unwrap();
    let x = Tensor::new(vec![16, 1, cfg.lookback], random(16 * cfg.lookback, 3)).unwrap();
    let y = Tensor::new(vec![16, 1, cfg.horizon], random(16 * cfg.horizon, 4)).unwrap();
    group.bench_function("predict_b16_d64", |b| {
        b.iter(|| model.predict(black_box(&x)).unwrap())
    });
    group.bench_function("train_step_b16_d64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::train(stream_rng(0, "bench"));
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let out = model.forward(&mut tape, xv, &mut ctx).unwrap();
            let loss = tape.mse_loss(out, yv).unwrap();
            tape.backward(loss).unwrap();
            tape
        })
    });
    group.finish();
}

criterion_group!(benches, rfft, filter, model);
criterion_main!(benches);
