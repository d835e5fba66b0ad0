mod common;

use dect_core::denoiser::DenoiserParams;
use dect_core::recon::{e2e_decomp_with_system, DcSystem, Lambda, ReconConfig};
use dect_core::train::*;
use dect_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 8;
const PS: f64 = 0.25;

/// Fixed-count CG with no stopping test: the loss is then a smooth function of
/// its inputs and central differences are not polluted by jumps in the
/// iteration count.
fn tight(k: usize, lambda: Lambda) -> ReconConfig {
    ReconConfig {
        lambda,
        k_outer: k,
        cg_max_iter: 400,
        cg_rel_tol: 0.0,
    }
}

fn fixture(n: usize, angles: usize) -> (Geometry, DcSystem, MaterialImage) {
    let model = common::model();
    let g = Geometry::compact(angles, n, n, PS).unwrap();
    let truth = common::solid_phantom(n, PS, 1.0);
    let d = common::decomposer_for(&model, &[&truth], &g);
    let y = common::noisy(&truth, &g, &model, 3);
    let sys = DcSystem::from_measurements(&g, &d, &y).unwrap();
    (g, sys, truth)
}

#[test]
fn dc_backward_vanishes_without_regularization() {
    let (_, sys, _) = fixture(N, 12);
    let up = vec![1.0; sys.n_unknowns()];
    assert!(dc_backward(&sys, 0.0, &up, &tight(1, Lambda::Fixed(1.0)))
        .unwrap()
        .iter()
        .all(|v| *v == 0.0));
}

#[test]
fn dc_backward_is_identity_without_data() {
    let g = Geometry::compact(12, N, N, PS).unwrap();
    let n = g.n_rays();
    let p = MaterialSinogram::zeros(12, g.n_detectors());
    let sys = DcSystem::assemble(&g, &p, [vec![0.0; n], vec![0.0; n]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let up: Vec<f64> = (0..sys.n_unknowns()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let got = dc_backward(&sys, 0.7, &up, &tight(1, Lambda::Fixed(0.7))).unwrap();
    for (a, b) in got.iter().zip(&up) {
        assert!((a - b).abs() <= 1e-14);
    }
}

#[test]
fn dc_backward_matches_finite_differences() {
    let (_, sys, truth) = fixture(N, 12);
    let config = tight(1, Lambda::Scaled(0.005));
    let lambda = sys.resolve_lambda(config.lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let up: Vec<f64> = (0..sys.n_unknowns()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z = truth.as_slice().to_vec();
    let grad = dc_backward(&sys, lambda, &up, &config).unwrap();
    let objective = |z: &[f64]| -> f64 {
        let sol = dect_core::recon::dc_solve(&sys, z, lambda, &config, None).unwrap();
        sol.unclamped.iter().zip(&up).map(|(a, b)| a * b).sum()
    };
    for k in (0..sys.n_unknowns()).step_by(13).take(10) {
        let h = 1.0;
        let (mut a, mut b) = (z.clone(), z.clone());
        a[k] += h;
        b[k] -= h;
        let fd = (objective(&a) - objective(&b)) / (2.0 * h);
        assert!(
            (fd - grad[k]).abs() <= 1e-4 * fd.abs().max(grad[k].abs()).max(1e-3),
            "z[{k}]: {fd} vs {}",
            grad[k]
        );
    }
}

#[test]
fn loss_against_own_output_is_zero() {
    let (_, sys, _) = fixture(N, 12);
    let d = DenoiserParams::random(&[2, 4, 2], 3, 1000.0, 0.1, 5).unwrap();
    let config = ReconConfig {
        k_outer: 3,
        ..ReconConfig::default()
    };
    let (out, _) = e2e_decomp_with_system(&sys, &d, &config).unwrap();
    assert_eq!(unrolled_loss(&sys, &out, &d, &config).unwrap(), 0.0);
    let c = 7.5;
    let shifted = MaterialImage::from_channel_major(N, N, PS, out.as_slice().iter().map(|v| v + c).collect()).unwrap();
    let loss = unrolled_loss(&sys, &shifted, &d, &config).unwrap();
    assert!((loss - c * c).abs() <= 1e-9 * c * c);
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let (_, sys, truth) = fixture(N, 12);
    let d = DenoiserParams::random(&[2, 4, 2], 3, 1000.0, 0.3, 8).unwrap();
    let config = tight(2, Lambda::Scaled(0.005));
    let (_, grad) = unrolled_loss_and_grad(&sys, &truth, &d, &config).unwrap();
    let flat = d.flatten();
    let loss_at = |theta: &[f64]| {
        let mut p = d.clone();
        p.set_flat(theta).unwrap();
        unrolled_loss(&sys, &truth, &p, &config).unwrap()
    };
    for k in 0..flat.len() {
        let h = 1e-4 * flat[k].abs().max(1e-2);
        let (mut a, mut b) = (flat.clone(), flat.clone());
        a[k] += h;
        b[k] -= h;
        let fd = (loss_at(&a) - loss_at(&b)) / (2.0 * h);
        let scale = fd
            .abs()
            .max(grad[k].abs())
            .max(1e-6 * grad.iter().fold(0.0f64, |m, g| m.max(g.abs())));
        assert!(
            (fd - grad[k]).abs() <= 1e-4 * scale,
            "param {k}: fd {fd} vs {}",
            grad[k]
        );
    }
}

#[test]
fn parameter_count_does_not_depend_on_unrolling() {
    let (_, sys, truth) = fixture(N, 12);
    let d = DenoiserParams::random(&[2, 4, 2], 3, 1000.0, 0.3, 8).unwrap();
    for k in 1..=4 {
        let (_, grad) = unrolled_loss_and_grad(
            &sys,
            &truth,
            &d,
            &ReconConfig {
                k_outer: k,
                ..ReconConfig::default()
            },
        )
        .unwrap();
        assert_eq!(grad.len(), d.n_params());
        if k == 1 {
            // a single DC block never reaches the denoiser
            assert!(grad.iter().all(|g| *g == 0.0));
        }
    }
}

fn small_dataset(
    n: usize,
    count: usize,
    angles: usize,
) -> (
    Geometry,
    Vec<(EnergySinogram, MaterialImage)>,
    decomp::PolynomialDecomposer,
) {
    let model = common::model();
    let g = Geometry::compact(angles, n, n, PS).unwrap();
    let imgs: Vec<MaterialImage> = (0..count)
        .map(|i| common::solid_phantom(n, PS, 1.0 - 0.5 * i as f64))
        .collect();
    let d = common::decomposer_for(&model, &imgs.iter().collect::<Vec<_>>(), &g);
    let data = imgs
        .into_iter()
        .enumerate()
        .map(|(i, x)| (common::noisy(&x, &g, &model, 40 + i as u64), x))
        .collect();
    (g, data, d)
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (g, data, d) = small_dataset(N, 2, 12);
    let init = DenoiserParams::random(&[2, 4, 2], 3, 1000.0, 0.3, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    let out = train(&data, &g, &d, &init, &ReconConfig::default(), &cfg).unwrap();
    assert_eq!(out.params, init);
}

#[test]
fn training_is_reproducible_and_monotone() {
    let (g, data, d) = small_dataset(16, 3, 16);
    let init = DenoiserParams::random(&[2, 4, 2], 3, 1000.0, 0.1, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        seed: 11,
        learning_rate: 0.03,
        ..TrainConfig::default()
    };
    let a = train(&data, &g, &d, &init, &ReconConfig::default(), &cfg).unwrap();
    let b = train(&data, &g, &d, &init, &ReconConfig::default(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.log.len(), 7);
    for w in a.log.windows(2) {
        assert!(w[1].loss <= w[0].loss);
    }
    assert!(a.log.last().unwrap().loss < a.log[0].loss);
}

#[test]
fn single_sample_is_overfit() {
    // noiseless data: only the systematic error of the unrolled solve is left to learn
    let model = common::model();
    let g = Geometry::compact(30, 32, 32, PS).unwrap();
    let truth = phantom::make_phantom(&phantom::random_breast_spec(1, 32, 32, PS)).unwrap();
    let d = common::decomposer_for(&model, &[&truth], &g);
    let p = simulate::material_sinogram(&truth, &g).unwrap();
    let y = simulate::noiseless(&p, &model).unwrap();
    let init = DenoiserParams::random(&[2, 16, 16, 2], 3, 1000.0, 0.1, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 1,
        learning_rate: 0.03,
        ..TrainConfig::default()
    };
    let out = train(&[(y, truth)], &g, &d, &init, &ReconConfig::default(), &cfg).unwrap();
    let (first, last) = (out.log[0].loss, out.log.last().unwrap().loss);
    assert!(last * 10.0 <= first, "loss {first} -> {last}");
}

#[test]
fn runaway_steps_are_rolled_back() {
    let (g, data, d) = small_dataset(N, 2, 12);
    let init = DenoiserParams::random(&[2, 4, 2], 3, 1000.0, 0.1, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        learning_rate: 1e6,
        ..TrainConfig::default()
    };
    let out = train(&data, &g, &d, &init, &ReconConfig::default(), &cfg).unwrap();
    assert!(out.params.flatten().iter().all(|v| v.is_finite()));
    assert!(out.log.iter().all(|r| r.loss.is_finite()));
    for w in out.log.windows(2) {
        assert!(w[1].loss <= w[0].loss);
    }
}

#[test]
fn invalid_training_configs_are_rejected() {
    assert!(TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        learning_rate: -1.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    let (g, _, d) = small_dataset(N, 1, 12);
    let init = DenoiserParams::default_architecture();
    assert!(train(&[], &g, &d, &init, &ReconConfig::default(), &TrainConfig::default()).is_err());
}
