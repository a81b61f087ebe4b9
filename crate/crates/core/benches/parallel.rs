//! Rayon pool against a single worker on the hot kernels.
//!
//! `cargo bench -p maze-core` compares the default pool with a one-thread
//! pool; `--no-default-features` builds the sequential fallback instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use maze_core::attack::{Attack, AttackConfig, GradientSource, NoTerm};
use maze_core::error::Result;
use maze_core::nn::{LayerSpec, Model};
use maze_core::oracle::{BlackBoxOracle, QueryLedger};
use maze_core::par;
use maze_core::tensor::Tensor;
use maze_core::zo::{estimate_grad, ZoConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pools() -> Vec<(&'static str, usize)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![("pool", all), ("single", 1)]
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::standard_normal(256, 256, &mut rng);
    let b = Tensor::standard_normal(256, 256, &mut rng);
    let mut group = c.benchmark_group("matmul_256");
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| par::with_threads(threads, || a.matmul(&b).unwrap()).unwrap())
        });
    }
    group.finish();
}

fn zo_estimate(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::mlp(
        32,
        &[64, 64],
        4,
        LayerSpec::Relu,
        Some(LayerSpec::Softmax),
        &mut rng,
    )
    .unwrap();
    let x = Tensor::uniform(128, 32, -1.0, 1.0, &mut rng);
    let loss = |x: &Tensor| -> Result<Vec<f64>> {
        let y = model.forward(x)?;
        Ok((0..y.rows()).map(|r| y.row(r)[0]).collect())
    };
    let cfg = ZoConfig::default();
    let mut group = c.benchmark_group("estimate_grad_b128_d32_m10");
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                par::with_threads(threads, || {
                    estimate_grad(loss, &x, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

fn attack_iteration(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = Model::mlp(
        32,
        &[64, 64],
        4,
        LayerSpec::Relu,
        Some(LayerSpec::Softmax),
        &mut rng,
    )
    .unwrap();
    let oracle = BlackBoxOracle::new(target, QueryLedger::unbounded()).unwrap();
    let cfg = AttackConfig::default();
    let mut group = c.benchmark_group("attack_iteration_default");
    group.sample_size(20);
    for (name, threads) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                par::with_threads(threads, || {
                    let mut attack = Attack::new(&oracle, cfg.clone()).unwrap();
                    attack
                        .generator_phase(
                            cfg.lr_generator,
                            &mut GradientSource::ZerothOrder,
                            &mut NoTerm,
                        )
                        .unwrap();
                    attack.clone_phase(cfg.lr_clone).unwrap();
                    attack.replay_phase(cfg.lr_clone).unwrap();
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, zo_estimate, attack_iteration);
criterion_main!(benches);
