//! Ensemble training with members run inline versus on the thread pool.
//! Build with `--no-default-features` to measure the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protonam::config::TrainConfig;
use protonam::data::EncodedData;
use protonam::par;
use protonam::training::train_ensemble;

fn synthetic(rows: usize, features: usize) -> EncodedData {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<Vec<f64>> = (0..features)
        .map(|_| (0..rows).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let targets = (0..rows)
        .map(|r| x.iter().enumerate().map(|(i, c)| (c[r] * (i + 1) as f64).sin()).sum())
        .collect();
    EncodedData {
        features: x,
        targets,
        groups: vec![0; rows],
    }
}

fn ensembles(c: &mut Criterion) {
    let data = synthetic(1024, 6);
    let cfg = TrainConfig {
        prototypes: 8,
        layers: 2,
        hidden_dim: 16,
        batch_size: 256,
        max_iteration: 20,
        eval_every: 20,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("ensemble_of_4");
    group.sample_size(10);
    let modes: &[(&str, usize)] = if par::is_parallel() {
        &[("sequential", 1), ("pool", 0)]
    } else {
        &[("fallback", 0)]
    };
    for &(name, jobs) in modes {
        group.bench_with_input(BenchmarkId::from_parameter(name), &jobs, |b, &jobs| {
            b.iter(|| train_ensemble(&cfg, &data, None, 1, 4, jobs).unwrap())
        });
    }
    group.finish();
}

fn map_only(c: &mut Criterion) {
    let work = |k: u64| (0..200_000u64).fold(k, |a, i| a.wrapping_mul(6364136223846793005).wrapping_add(i));
    let mut group = c.benchmark_group("par_map_16");
    for (name, jobs) in [("sequential", 1usize), ("pool", 0)] {
        group.bench_function(name, |b| b.iter(|| par::map((0..16).collect(), jobs, work)));
    }
    group.finish();
}

criterion_group!(benches, ensembles, map_only);
criterion_main!(benches);
