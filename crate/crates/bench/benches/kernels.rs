use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use nalgebra::DMatrix;
use retrain_bench::{batch, env};
use retrain_core::classifier::{self, FitConfig};
use retrain_core::mdp::Environment;
use retrain_core::ppo::{self, PpoOptimizer};
use retrain_core::rng::{stream_rng, Stream};
use retrain_core::{Action, Policy, PpoConfig};
use std::hint::black_box;

fn irls(c: &mut Criterion) {
    let mut group = c.benchmark_group("irls_fit");
    for n in [2_000, 10_000] {
        let b = batch(n, 1);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &b, |bench, b| {
            bench.iter(|| classifier::fit(black_box(b), &FitConfig::default()).unwrap())
        });
    }
    group.finish();
}

fn mlp(c: &mut Criterion) {
    let policy = Policy::new(14, &[64, 64], &mut stream_rng(1, Stream::NetworkInit, 0)).unwrap();
    let inputs = DMatrix::from_fn(14, 64, |i, j| ((i * 7 + j) as f64 * 0.37).sin());
    let grad = DMatrix::from_element(2, 64, 1.0 / 64.0);
    c.bench_function("mlp_forward_64", |b| {
        b.iter(|| policy.actor.forward_batch(black_box(&inputs)).unwrap())
    });
    c.bench_function("mlp_forward_backward_64", |b| {
        b.iter(|| {
            let cache = policy.actor.forward_batch(black_box(&inputs)).unwrap();
            policy.actor.backward(&cache, &grad).unwrap()
        })
    });
}

fn env_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("env_step");
    for (name, action) in [("keep", Action::Keep), ("update", Action::Update)] {
        let mut e = env(2_000, 2);
        e.reset().unwrap();
        group.bench_function(name, |b| {
            b.iter(|| {
                let step = e.step(action).unwrap();
                if step.done {
                    e.reset().unwrap();
                }
                step.reward
            })
        });
    }
    group.finish();
}

fn ppo_update(c: &mut Criterion) {
    let cfg = PpoConfig::default();
    let mut e = env(500, 3);
    let policy = Policy::new(e.state_dim(), &cfg.hidden_sizes, &mut stream_rng(3, Stream::NetworkInit, 0)).unwrap();
    let mut buffer =
        ppo::collect_rollout(&mut e, &policy, cfg.rollout_len, &mut stream_rng(3, Stream::Training, 1)).unwrap();
    buffer.finalize(cfg.gamma, cfg.gae_lambda).unwrap();
    let mut group = c.benchmark_group("ppo");
    group.sample_size(10);
    group.bench_function("update_2048x10_epochs", |b| {
        b.iter_batched(
            || (policy.clone(), PpoOptimizer::new(&policy, &cfg), stream_rng(3, Stream::Training, 2)),
            |(mut p, mut opt, mut rng)| ppo::ppo_update(&mut p, &mut opt, &buffer, &cfg, &mut rng).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, irls, mlp, env_step, ppo_update);
criterion_main!(benches);
