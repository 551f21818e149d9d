use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use jigsaw_core::cost_model::CostModel;
use jigsaw_core::par::{map_slice, Exec};
use jigsaw_core::sim::{self, ClusterConfig, Policy, SimConfig};
use jigsaw_core::spb::{empirical_variance, LayeredModel, SpbConfig};
use jigsaw_core::trace::{self, GenConfig};

fn variance(c: &mut Criterion) {
    let model = LayeredModel::random_quadratic(256, &[4, 4, 4, 4, 4, 4, 4, 4], 0.5, 1).unwrap();
    let cfg = SpbConfig::measured(&model, 8, 128).unwrap();
    let mut g = c.benchmark_group("empirical_variance");
    g.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Auto)] {
        g.bench_with_input(BenchmarkId::new(name, 2000), &exec, |b, &exec| {
            b.iter(|| empirical_variance(&model, &cfg, 2000, 7, exec).unwrap())
        });
    }
    g.finish();
}

fn seed_sweep(c: &mut Criterion) {
    let cost = CostModel::builtin();
    let gen = GenConfig {
        n_jobs: 60,
        ..GenConfig::default()
    };
    let seeds: Vec<u64> = (0..8).collect();
    let cluster = ClusterConfig::new(8, 16.0).unwrap();
    let cfg = SimConfig {
        record_history: false,
        ..SimConfig::default()
    };
    let mut g = c.benchmark_group("seed_sweep");
    g.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Auto)] {
        g.bench_function(name, |b| {
            b.iter(|| {
                map_slice(exec, &seeds, |&s| {
                    let dags = trace::to_dags(&trace::generate(s, &gen, &cost).unwrap()).unwrap();
                    sim::run(&dags, &cluster, Policy::Jigsaw, &cfg, &cost)
                        .unwrap()
                        .report
                        .makespan
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, variance, seed_sweep);
criterion_main!(benches);
