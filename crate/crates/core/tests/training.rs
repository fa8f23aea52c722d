//! Desk-scale end-to-end training behavior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sphereflow_core::datastore::{sample_vmf, EmbeddingPairSet};
use sphereflow_core::fieldnet::{loss_and_param_grad, FlowSample};
use sphereflow_core::sphere::{sample_uniform, SpherePoint};
use sphereflow_core::trainer::{
    fit, sample_training_tuple, FlowConfig, GeometryMode, StepMetrics, TrainHooks,
};

fn vmf_pairs(
    n: usize,
    image_mean: &SpherePoint,
    text_mean: &SpherePoint,
    kappa: f64,
    seed: u64,
) -> EmbeddingPairSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image: Vec<SpherePoint> = (0..n)
        .map(|_| sample_vmf(image_mean, kappa, &mut rng).unwrap())
        .collect();
    let text: Vec<SpherePoint> = (0..n)
        .map(|_| sample_vmf(text_mean, kappa, &mut rng).unwrap())
        .collect();
    EmbeddingPairSet::from_points(&image, &text).unwrap()
}

fn desk_cfg() -> FlowConfig {
    FlowConfig {
        depth: 2,
        hidden: 16,
        freqs: 8,
        learning_rate: 2e-3,
        batch_size: 32,
        total_steps: 600,
        warmup_steps: 100,
        seed: 5,
        ..FlowConfig::new(3)
    }
}

#[test]
fn initial_loss_matches_mean_squared_angle() {
    // At zero init the loss is the mean squared geodesic distance between
    // the base draw and the data point; by rotational symmetry that is the
    // mean squared angle between two uniform points, estimated by MC.
    let mu = SpherePoint::new(vec![0.0, 0.0, 1.0]).unwrap();
    let pairs = vmf_pairs(256, &mu, &mu, 20.0, 1);
    let mut cfg = desk_cfg();
    cfg.batch_size = 2048;
    cfg.total_steps = 1;
    cfg.learning_rate = 1e-9;

    let mut first_loss = f64::NAN;
    let mut hooks = TrainHooks {
        metrics_every: 1,
        on_metrics: Some(Box::new(|m: &StepMetrics| {
            if m.step == 1 {
                first_loss = m.loss;
            }
        })),
        ..TrainHooks::default()
    };
    fit(&pairs, &cfg, &mut hooks).unwrap();
    drop(hooks);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 50_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let a = sample_uniform(3, &mut rng).unwrap();
        let b = sample_uniform(3, &mut rng).unwrap();
        let theta = sphereflow_core::sphere::geodesic_distance(&a, &b).unwrap();
        acc += theta * theta;
    }
    let mc = acc / n as f64;
    assert!(
        (first_loss - mc).abs() < 0.3,
        "first loss {first_loss} vs MC mean squared angle {mc}"
    );
}

#[test]
fn vmf_training_reduces_loss() {
    let mu = SpherePoint::new(vec![0.0, 0.0, 1.0]).unwrap();
    let pairs = vmf_pairs(2048, &mu, &mu, 20.0, 3);
    let cfg = desk_cfg();

    let mut losses: Vec<(u64, f64)> = Vec::new();
    let mut hooks = TrainHooks {
        metrics_every: 10,
        on_metrics: Some(Box::new(|m: &StepMetrics| losses.push((m.step, m.loss)))),
        ..TrainHooks::default()
    };
    fit(&pairs, &cfg, &mut hooks).unwrap();
    drop(hooks);

    let early: f64 =
        losses.iter().take(5).map(|(_, l)| l).sum::<f64>() / 5.0;
    let late: f64 = losses.iter().rev().take(5).map(|(_, l)| l).sum::<f64>() / 5.0;
    assert!(
        late < 0.6 * early,
        "training failed to reduce loss: early {early:.4} late {late:.4}"
    );
}

#[test]
fn both_modalities_improve_on_separable_task() {
    // Image and text sides live in different caps; the shared network must
    // serve both conditions.
    let mu_img = SpherePoint::new(vec![0.0, 0.0, 1.0]).unwrap();
    let mu_txt = SpherePoint::new(vec![1.0, 0.0, 0.0]).unwrap();
    let pairs = vmf_pairs(2048, &mu_img, &mu_txt, 20.0, 7);
    let mut cfg = desk_cfg();
    cfg.total_steps = 800;

    let init_params = {
        let mut zero_cfg = cfg.clone();
        zero_cfg.total_steps = 0;
        fit(&pairs, &zero_cfg, &mut TrainHooks::default()).unwrap()
    };
    let trained = fit(&pairs, &cfg, &mut TrainHooks::default()).unwrap();

    // Per-modality regression loss on fresh tuples.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut image_batch: Vec<FlowSample> = Vec::new();
    let mut text_batch: Vec<FlowSample> = Vec::new();
    while image_batch.len() < 256 || text_batch.len() < 256 {
        let s = sample_training_tuple(&pairs, &cfg, &mut rng).unwrap();
        match s.modality {
            sphereflow_core::sphere::Modality::Image if image_batch.len() < 256 => {
                image_batch.push(s)
            }
            sphereflow_core::sphere::Modality::Text if text_batch.len() < 256 => {
                text_batch.push(s)
            }
            _ => {}
        }
    }

    for batch in [&image_batch, &text_batch] {
        let (before, _) = loss_and_param_grad(&init_params, batch, true).unwrap();
        let (after, _) = loss_and_param_grad(&trained, batch, true).unwrap();
        assert!(
            after < 0.75 * before,
            "modality loss did not improve: before {before:.4} after {after:.4}"
        );
    }

    // The trained field must actually condition on the modality tag.
    let mut max_gap = 0.0f64;
    for _ in 0..32 {
        let z = sample_uniform(3, &mut rng).unwrap();
        for t in [0.1, 0.5, 0.9] {
            let vi = sphereflow_core::fieldnet::forward(
                &trained,
                &z,
                t,
                sphereflow_core::sphere::Modality::Image,
            )
            .unwrap();
            let vt = sphereflow_core::fieldnet::forward(
                &trained,
                &z,
                t,
                sphereflow_core::sphere::Modality::Text,
            )
            .unwrap();
            for (a, b) in vi.vec().iter().zip(vt.vec()) {
                max_gap = max_gap.max((a - b).abs());
            }
        }
    }
    assert!(
        max_gap > 1e-3,
        "image and text fields should differ on a separable task, max gap {max_gap:.2e}"
    );
}

#[test]
fn euclidean_modes_also_train() {
    let mu = SpherePoint::new(vec![0.0, 1.0, 0.0]).unwrap();
    let pairs = vmf_pairs(1024, &mu, &mu, 20.0, 11);
    for mode in [
        GeometryMode::EuclideanUniformBase,
        GeometryMode::EuclideanGaussianBase,
    ] {
        let mut cfg = desk_cfg();
        cfg.geometry_mode = mode;
        cfg.total_steps = 400;
        let mut losses: Vec<f64> = Vec::new();
        let mut hooks = TrainHooks {
            metrics_every: 10,
            on_metrics: Some(Box::new(|m: &StepMetrics| losses.push(m.loss))),
            ..TrainHooks::default()
        };
        fit(&pairs, &cfg, &mut hooks).unwrap();
        drop(hooks);
        let early = losses[0];
        let late = losses[losses.len() - 1];
        assert!(
            late < 0.7 * early,
            "{} failed to train: early {early:.4} late {late:.4}",
            mode.name()
        );
    }
}
