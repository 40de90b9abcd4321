mod common;

use common::*;
use dplda_core::calibration::{
    log_sum_exp, train_global_calibration, weighted_cross_entropy, GlobalCalibration,
    MetaCalibration,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scores equal to the true LLR between `N(+1, 1)` targets and `N(-1, 1)`
/// impostors, which is `2x`.
fn perfect_llrs(n: usize, seed: u64) -> Vec<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let t = k % 2 == 0;
            let x = if t { 1.0 } else { -1.0 } + randn(&mut rng);
            (2.0 * x, t)
        })
        .collect()
}

#[test]
fn perfect_llrs_keep_identity_calibration() {
    let s = perfect_llrs(20_000, 1);
    let g = train_global_calibration(&s, 0.5).unwrap();
    assert!((g.alpha - 1.0).abs() < 0.1 && g.beta.abs() < 0.1, "{g:?}");
}

#[test]
fn negated_llrs_get_negative_scale() {
    let s: Vec<(f64, bool)> = perfect_llrs(20_000, 2)
        .into_iter()
        .map(|(x, t)| (-x, t))
        .collect();
    let g = train_global_calibration(&s, 0.5).unwrap();
    assert!((g.alpha + 1.0).abs() < 0.1 && g.beta.abs() < 0.1, "{g:?}");
}

#[test]
fn optimum_has_vanishing_gradient() {
    let s = perfect_llrs(50_000, 3);
    let prior: f64 = 0.3;
    let g = train_global_calibration(&s, prior).unwrap();
    let lp = (prior / (1.0 - prior)).ln();
    let n_t = s.iter().filter(|p| p.1).count() as f64;
    let n_i = s.len() as f64 - n_t;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let (mut ga, mut gb) = (0.0, 0.0);
    for &(x, t) in &s {
        let z = g.alpha * x + g.beta + lp;
        let d = if t {
            -prior / n_t * sig(-z)
        } else {
            (1.0 - prior) / n_i * sig(z)
        };
        ga += d * x;
        gb += d;
    }
    assert!((ga * ga + gb * gb).sqrt() < 1e-9);
}

#[test]
fn training_never_worse_than_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let shift = rng.random_range(-3.0..3.0);
        let scale = rng.random_range(0.2..4.0);
        let s: Vec<(f64, bool)> = perfect_llrs(500, rng.random())
            .into_iter()
            .map(|(x, t)| (scale * x + shift, t))
            .collect();
        let prior = rng.random_range(0.05..0.95);
        let g = train_global_calibration(&s, prior).unwrap();
        let cost = |a: f64, b: f64| {
            let l: Vec<(f64, bool)> = s.iter().map(|&(x, t)| (a * x + b, t)).collect();
            weighted_cross_entropy(&l, prior).unwrap()
        };
        assert!(cost(g.alpha, g.beta) <= cost(1.0, 0.0) + 1e-12);
    }
}

#[test]
fn metadata_vectors_lie_on_log_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let mc = MetaCalibration::from_global(
            GlobalCalibration::identity(),
            rand_mat(5, 10, 2.0, &mut rng),
            false,
        );
        let z = mc.metadata_vector(&rand_vec(10, 3.0, &mut rng));
        assert!(z.iter().all(|&v| v <= 0.0));
        assert!(log_sum_exp(&z).abs() < 1e-9);
        assert!((z.map(f64::exp).sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn conditioned_parameters_match_longhand() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mc = MetaCalibration {
        w: rand_mat(5, 10, 0.5, &mut rng),
        lambda_a: rand_sym(5, 1.0, &mut rng),
        gamma_a: rand_sym(5, 1.0, &mut rng),
        c_a: rand_vec(5, 1.0, &mut rng),
        k_a: 0.7,
        lambda_b: rand_sym(5, 1.0, &mut rng),
        gamma_b: rand_sym(5, 1.0, &mut rng),
        c_b: rand_vec(5, 1.0, &mut rng),
        k_b: -0.4,
        use_gamma: true,
    };
    let z1 = rand_vec(5, 1.0, &mut rng);
    let z2 = rand_vec(5, 1.0, &mut rng);
    let longhand = |l: &DMatrix<f64>, g: &DMatrix<f64>, c: &DVector<f64>, k: f64| {
        let mut acc = k;
        for i in 0..5 {
            acc += (z1[i] + z2[i]) * c[i];
            for j in 0..5 {
                acc += 2.0 * z1[i] * l[(i, j)] * z2[j];
                acc += z1[i] * g[(i, j)] * z1[j] + z2[i] * g[(i, j)] * z2[j];
            }
        }
        acc
    };
    let (a, b) = mc.conditioned_alpha_beta(&z1, &z2);
    assert!((a - longhand(&mc.lambda_a, &mc.gamma_a, &mc.c_a, mc.k_a)).abs() < 1e-12);
    assert!((b - longhand(&mc.lambda_b, &mc.gamma_b, &mc.c_b, mc.k_b)).abs() < 1e-12);
    assert_eq!(mc.conditioned_alpha_beta(&z2, &z1), (a, b));
}

#[test]
fn initialization_draws_projection_with_requested_spread() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut all = Vec::new();
    for _ in 0..200 {
        let mc = MetaCalibration::initialize(
            GlobalCalibration {
                alpha: 2.0,
                beta: -1.0,
            },
            10,
            false,
            &mut rng,
        );
        assert_eq!((mc.k_a, mc.k_b), (2.0, -1.0));
        assert!(mc.lambda_a.iter().chain(mc.c_b.iter()).all(|&v| v == 0.0));
        all.extend(mc.w.iter().copied());
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let sd = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.02 && (sd - 0.5).abs() < 0.02, "{mean} {sd}");
}
