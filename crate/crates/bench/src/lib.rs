//! Shared fixtures for the criterion benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sphereflow_core::datastore::{
    generate_synthetic_pairs, EmbeddingPairSet, SyntheticKind, SyntheticSpec, VmfComponent,
};
use sphereflow_core::fieldnet::FieldParams;
use sphereflow_core::sphere::SpherePoint;

pub fn bench_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xbe7c)
}

/// Network with randomized output so benches exercise non-trivial values.
pub fn bench_params(dim: usize, hidden: usize, depth: usize, freqs: usize) -> FieldParams {
    let mut rng = bench_rng();
    let mut params = FieldParams::init(dim, hidden, depth, freqs, &mut rng).unwrap();
    use rand::Rng;
    for w in params
        .output_proj
        .w
        .iter_mut()
        .chain(params.output_proj.b.iter_mut())
    {
        *w = rng.random_range(-0.3..0.3);
    }
    params
}

pub fn bench_pairs(dim: usize, n: usize) -> EmbeddingPairSet {
    let mut mean = vec![0.0; dim];
    mean[dim - 1] = 1.0;
    let spec = SyntheticSpec {
        kind: SyntheticKind::Vmf,
        dim,
        components: vec![VmfComponent {
            mean: SpherePoint::new(mean).unwrap(),
            kappa: 12.0,
            weight: 1.0,
        }],
        count: n,
        seed: 7,
    };
    generate_synthetic_pairs(&spec).unwrap()
}
