use criterion::{criterion_group, criterion_main, Criterion};

use randomout::experiments::sweep::{run_jobs, run_jobs_sequential};
use randomout::experiments::{DatasetSpec, TrainConfig};

/// Eight short CraterCNN runs that differ only by seed.
fn jobs() -> Vec<TrainConfig> {
    (0..8)
        .map(|seed| {
            let mut cfg = TrainConfig::crater_default(4, seed);
            cfg.dataset = DatasetSpec::synth(100, 100, 0);
            cfg.epochs = 2;
            cfg
        })
        .collect()
}

fn sweep(c: &mut Criterion) {
    let cfgs = jobs();
    let workers = std::thread::available_parallelism().map_or(2, |n| n.get().max(2));
    let mut group = c.benchmark_group("seed_sweep_8_runs");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| run_jobs_sequential(&cfgs, None).unwrap()));
    group.bench_function(format!("parallel_{workers}_workers"), |b| {
        b.iter(|| run_jobs(&cfgs, workers, None).unwrap())
    });
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
