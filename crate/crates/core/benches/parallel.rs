//! Sequential versus data-parallel execution of the three fan-out points:
//! metric batches, control sweeps and training rollouts.
//!
//! Build with `--no-default-features` to get the single-threaded library for
//! comparison; then both variants run inline.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use condgen_core::agent::GreedyAgent;
use condgen_core::config::RunConfig;
use condgen_core::env::{ControlSpec, EnvSettings, EnvSpec};
use condgen_core::eval::{sweep, SweepSettings};
use condgen_core::grid::{random_map, Domain, DomainSpec};
use condgen_core::metrics::binary_metrics;
use condgen_core::par::{self, Execution};
use condgen_core::train::Trainer;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn metric_batch(c: &mut Criterion) {
    let d = DomainSpec::new(Domain::Binary);
    let maps: Vec<_> = (0..64).map(|s| random_map(&d, s)).collect();
    let mut g = c.benchmark_group("metric_batch_64x14x14");
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| par::map(exec, &maps, binary_metrics)));
    }
    g.finish();
}

fn control_sweep(c: &mut Criterion) {
    let d = DomainSpec::with_size(Domain::Binary, 8, 8).unwrap();
    let control = ControlSpec::builder(&d)
        .control("regions", 1, 8)
        .build()
        .unwrap();
    let env = EnvSpec::new(d, control, EnvSettings::default()).unwrap();
    let settings = SweepSettings {
        episodes_per_cell: 4,
        step_cap: 200,
        ..SweepSettings::default()
    };
    let axes = vec![(1..=8).collect::<Vec<i64>>()];
    let mut g = c.benchmark_group("greedy_sweep_8x8");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| sweep(&env, &GreedyAgent, &axes, &settings, exec).unwrap())
        });
    }
    g.finish();
}

fn rollout(c: &mut Criterion) {
    let cfg = RunConfig::from_toml(
        r#"
[domain]
name = "binary"
height = 8
width = 8
[control]
controlled = [{ name = "regions", low = 1, high = 8 }]
[training]
workers = 8
segment_length = 32
"#,
    )
    .unwrap();
    let mut g = c.benchmark_group("training_update_8_workers");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, exec| {
            b.iter_batched(
                || Trainer::new(&cfg, *exec).unwrap(),
                |mut t| t.update().unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, metric_batch, control_sweep, rollout);
criterion_main!(benches);
