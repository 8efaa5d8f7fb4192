use acpo_bench::clustered_vectors;
use acpo_core::clustering::{agglomerate_vectors, ClusteringConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn average_linkage(c: &mut Criterion) {
    let cfg = ClusteringConfig::default();
    let mut group = c.benchmark_group("average_linkage");
    for n in [50, 150, 300, 600] {
        let vectors = clustered_vectors(n, 64, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &vectors, |b, v| {
            b.iter(|| agglomerate_vectors(black_box(v), &cfg).expect("valid input"))
        });
    }
    group.finish();
}

criterion_group!(benches, average_linkage);
criterion_main!(benches);
