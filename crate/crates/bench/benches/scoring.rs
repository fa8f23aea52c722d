use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sphereflow_bench::{bench_params, bench_rng};
use sphereflow_core::likelihood::{
    reverse_integrate, score_batch, DivergenceMode, IntegratorConfig,
};
use sphereflow_core::sphere::{sample_uniform, Modality, SpherePoint};
use std::hint::black_box;

fn scoring(c: &mut Criterion) {
    let mut group = c.benchmark_group("likelihood");
    group.sample_size(20);

    let params = bench_params(3, 64, 3, 32);
    let mut rng = bench_rng();
    let z = sample_uniform(3, &mut rng).unwrap();

    for steps in [1usize, 5, 8] {
        let icfg = IntegratorConfig {
            steps,
            ..IntegratorConfig::default()
        };
        group.bench_with_input(
            BenchmarkId::new("reverse_integrate_hutchinson", steps),
            &steps,
            |b, _| {
                b.iter(|| {
                    let mut r = ChaCha8Rng::seed_from_u64(1);
                    reverse_integrate(black_box(&params), &z, Modality::Image, &icfg, &mut r)
                        .unwrap()
                })
            },
        );
    }

    let exact = IntegratorConfig {
        steps: 5,
        divergence_mode: DivergenceMode::Exact,
        ..IntegratorConfig::default()
    };
    group.bench_function("reverse_integrate_exact_k5", |b| {
        b.iter(|| {
            let mut r = ChaCha8Rng::seed_from_u64(1);
            reverse_integrate(black_box(&params), &z, Modality::Image, &exact, &mut r).unwrap()
        })
    });

    let points: Vec<(SpherePoint, Modality)> = (0..64)
        .map(|_| (sample_uniform(3, &mut rng).unwrap(), Modality::Image))
        .collect();
    let icfg = IntegratorConfig::default();
    group.bench_function("score_batch_64_points", |b| {
        b.iter(|| score_batch(black_box(&params), &points, &icfg, 9, 0).unwrap())
    });

    group.finish();
}

criterion_group!(benches, scoring);
criterion_main!(benches);
