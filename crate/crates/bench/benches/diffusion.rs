use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tsdiff_core::sampler::generate;
use tsdiff_core::{Matrix, Model, ModelConfig, SamplerConfig};

const K: usize = 3;
const L: usize = 48;

fn inputs(seed: u64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(K, L, |_, _| rng.sample(StandardNormal));
    let m = Matrix::from_fn(K, L, |_, _| f64::from(u8::from(rng.random_bool(0.8))));
    (x.zip_map(&m, |v, w| v * w), m)
}

fn encoders() -> Vec<(&'static str, Model)> {
    let large = ModelConfig {
        time_dim: 512,
        ff_dim: 1024,
        ..ModelConfig::new(K)
    };
    vec![
        ("small", Model::new(ModelConfig::new(K), 1).unwrap()),
        ("large", Model::new(large, 1).unwrap()),
    ]
}

/// The embedding is computed once per input, so the per-step denoiser cost
/// should not move with the encoder size while the embedding cost does.
fn step_vs_embed(c: &mut Criterion) {
    let (x, m) = inputs(7);
    let ids: Vec<usize> = (0..K).collect();
    let xt = inputs(8).0;
    for (name, model) in encoders() {
        let z = model.embed(&x, &m, &ids).unwrap();
        c.bench_with_input(BenchmarkId::new("denoiser_step", name), &model, |b, model| {
            b.iter(|| model.predict_noise(black_box(&xt), 10, &z).unwrap())
        });
        c.bench_with_input(BenchmarkId::new("embed", name), &model, |b, model| {
            b.iter(|| model.embed(black_box(&x), &m, &ids).unwrap())
        });
    }
}

fn sampling(c: &mut Criterion) {
    let (x, m) = inputs(9);
    let ids: Vec<usize> = (0..K).collect();
    let model = Model::new(ModelConfig::tiny(K), 1).unwrap();
    let mut group = c.benchmark_group("sample");
    group.sample_size(10);
    for samples in [1, 8] {
        let cfg = SamplerConfig::new(samples, 3);
        group.bench_with_input(BenchmarkId::new("tiny", samples), &cfg, |b, cfg| {
            b.iter(|| generate(&model, &x, &m, &ids, cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, step_vs_embed, sampling);
criterion_main!(benches);
