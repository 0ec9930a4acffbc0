use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gradesync::analysis::{estimate_variance_mc, McOptions, SystemParams};
use gradesync::parallel::Execution;
use gradesync::protocols::Protocol;
use gradesync::sim::{scaling_experiment, SimConfig, Topology};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn mc_trials(c: &mut Criterion) {
    let p = SystemParams::normalized(0.1, 1e-4, 1e-4);
    let mut group = c.benchmark_group("mc_oracle");
    group.sample_size(10);
    for (name, execution) in MODES {
        let opts = McOptions {
            execution,
            ..McOptions::default()
        };
        group.bench_function(BenchmarkId::new(name, "2000x200"), |b| {
            b.iter(|| estimate_variance_mc(&p, Protocol::Grades, 2000, 200, 1, &opts).unwrap())
        });
    }
    group.finish();
}

fn seed_sweep(c: &mut Criterion) {
    let base = SimConfig {
        duration: 3000.0,
        ..SimConfig::new(Topology::line(2).unwrap())
    };
    let seeds: Vec<u64> = (0..16).collect();
    let mut group = c.benchmark_group("scaling_sweep");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new(name, "D4-16x16seeds"), |b| {
            b.iter(|| scaling_experiment(&base, Protocol::Grades, &[4, 16], &seeds, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, mc_trials, seed_sweep);
criterion_main!(benches);
