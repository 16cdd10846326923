use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use xmodal::exec::Execution;
use xmodal::index::{build_index_with, query_vectors, Modality};
use xmodal::metrics::{full_report, Direction, ReportOptions};
use xmodal::synth::{generate, SynthConfig};

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn bench(c: &mut Criterion) {
    let set = generate(&SynthConfig {
        n: 2000,
        dim: 64,
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let index = build_index_with(None, &set, Execution::Sequential).unwrap();
    let queries = query_vectors(None, &set, Modality::Image).unwrap();
    let opts = ReportOptions::default();

    let mut group = c.benchmark_group("build_index");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| build_index_with(None, &set, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("search_batch");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| index.search_batch(&queries, 10, None, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("full_report");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| full_report(&index, &set, None, Direction::I2t, &opts, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
