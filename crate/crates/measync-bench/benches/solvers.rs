//! Hot-path benchmarks on the synthetic protocol shape: 10 cameras, 3 true
//! particles, 12 estimated particles, complete graph.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use measync::divergences::{mmd_squared, sinkhorn_divergence};
use measync::measures::pushforward_relative;
use measync::{
    generate_ground_truth, initial_state, random_coupling, relative_measures_from_truth,
    rpgd_step, CouplingMode, DiscreteMeasure, GroundCost, GroundTruth, RotationGraph, SyncConfig,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ALPHA: f64 = 0.05;

fn protocol() -> (RotationGraph, GroundTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let truth = generate_ground_truth(10, 3, &mut rng).unwrap();
    let graph =
        relative_measures_from_truth(&truth, CouplingMode::HighEntropy, 1.0, &mut rng).unwrap();
    (graph, truth)
}

/// One edge's problem: the 144-atom pushforward of a random 12-particle
/// coupling against the 9-atom observed measure.
fn edge_problem() -> (DiscreteMeasure, DiscreteMeasure) {
    let (graph, _) = protocol();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let coupling = random_coupling(10, 12, CouplingMode::HighEntropy, &mut rng).unwrap();
    let hat = pushforward_relative(&coupling, 1, 2).unwrap();
    let target =
        graph.edges().iter().find(|e| (e.i, e.j) == (1, 2)).unwrap().measure.clone();
    (hat, target)
}

fn bench_divergences(c: &mut Criterion) {
    let (hat, target) = edge_problem();
    let cost = GroundCost::default();
    c.bench_function("sinkhorn_divergence_144x9", |b| {
        b.iter(|| sinkhorn_divergence(&hat, &target, &cost, ALPHA, 1e-9, 5000).unwrap())
    });
    c.bench_function("mmd_squared_144x9", |b| {
        b.iter(|| mmd_squared(&hat, &target, &cost))
    });
}

fn bench_pushforward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let coupling = random_coupling(10, 12, CouplingMode::HighEntropy, &mut rng).unwrap();
    c.bench_function("pushforward_he_12x12", |b| {
        b.iter(|| pushforward_relative(&coupling, 1, 2).unwrap())
    });
}

fn bench_step(c: &mut Criterion) {
    let (graph, _) = protocol();
    let config = SyncConfig { particles: 12, seed: 3, ..SyncConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let coupling = random_coupling(10, 12, CouplingMode::HighEntropy, &mut rng).unwrap();
    let mut warm = initial_state(coupling, &config).unwrap();
    // first step builds the per-edge caches so the benchmark sees the
    // steady-state cost
    rpgd_step(&mut warm, &graph, &config).unwrap();
    c.bench_function("rpgd_step_n10_k12", |b| {
        b.iter_batched(
            || warm.clone(),
            |mut state| rpgd_step(&mut state, &graph, &config).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, bench_divergences, bench_pushforward, bench_step);
criterion_main!(benches);
