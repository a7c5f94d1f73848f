use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtp_core::mask::{compute_mask, default_positions};
use rtp_core::metrics::{auc_pr, iou_f1_sweep, token_f1_sweep};
use rtp_core::objective::{total_objective, HyperParams};
use rtp_core::{Model, ModelConfig};

fn mask(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("compute_mask");
    for len in [32, 128, 510] {
        let w: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..len).map(|_| rng.random_range(0.5..10.0)).collect();
        let pos = default_positions(len);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| compute_mask(black_box(&w), black_box(&sigma), &pos).unwrap())
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens: Vec<u32> = (0..32).map(|_| rng.random_range(0..200)).collect();
    c.bench_function("forward_full/32", |b| b.iter(|| model.predict(black_box(&tokens)).unwrap()));
    let hp = HyperParams::default();
    c.bench_function("total_objective/32", |b| {
        b.iter(|| total_objective(&model, black_box(&tokens), &[1, 0, 1], &hp).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let len = 512;
    let scores: Vec<f64> = (0..len).map(|_| rng.random()).collect();
    let gt: Vec<u8> = (0..len).map(|i| u8::from((100..140).contains(&i))).collect();
    c.bench_function("auc_pr/512", |b| b.iter(|| auc_pr(black_box(&scores), &gt).unwrap()));
    c.bench_function("token_f1_sweep/512", |b| b.iter(|| token_f1_sweep(black_box(&scores), &gt).unwrap()));
    c.bench_function("iou_f1_sweep/512", |b| b.iter(|| iou_f1_sweep(black_box(&scores), &gt).unwrap()));
}

criterion_group!(benches, mask, model, metrics);
criterion_main!(benches);
