use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kurtlab::lab::{activation_kurtosis_constants, mixing_kurtosis_experiment};
use kurtlab::par::Exec;

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn kurtosis_constants(c: &mut Criterion) {
    let mut g = c.benchmark_group("activation_kurtosis_200k");
    g.sample_size(10);
    for (label, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(label), &exec, |b, &exec| {
            b.iter(|| black_box(activation_kurtosis_constants(exec, 0, 200_000).unwrap()))
        });
    }
    g.finish();
}

fn mixing_rows(c: &mut Criterion) {
    let mut g = c.benchmark_group("mixing_gaussian_row_d64_20k");
    g.sample_size(10);
    for (label, exec) in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(label), &exec, |b, &exec| {
            b.iter(|| black_box(mixing_kurtosis_experiment(exec, 0, 64, "laplace", "gaussian", 20_000).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, kurtosis_constants, mixing_rows);
criterion_main!(benches);
