use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sphereflow_bench::bench_rng;
use sphereflow_core::sphere::{sample_uniform, slerp, target_velocity};
use std::hint::black_box;

fn geometry(c: &mut Criterion) {
    let mut group = c.benchmark_group("geometry");
    for d in [3usize, 64, 512] {
        let mut rng = bench_rng();
        let z0 = sample_uniform(d, &mut rng).unwrap();
        let z1 = sample_uniform(d, &mut rng).unwrap();

        group.bench_with_input(BenchmarkId::new("slerp", d), &d, |b, _| {
            b.iter(|| slerp(black_box(&z0), black_box(&z1), black_box(0.37)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("target_velocity", d), &d, |b, _| {
            b.iter(|| target_velocity(black_box(&z0), black_box(&z1), black_box(0.37)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sample_uniform", d), &d, |b, _| {
            b.iter(|| sample_uniform(d, &mut rng).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, geometry);
criterion_main!(benches);
