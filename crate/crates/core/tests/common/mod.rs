//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use dplda_core::calibration::MetaCalibration;
use dplda_core::plda::{GaussianPlda, Projection, ScoreForm};
use dplda_core::trainer::{backward, batch_loss, BackendModel, BatchInputs, CalMode, ParamId};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn randn(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn rand_mat(r: usize, c: usize, s: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| s * randn(rng))
}

pub fn rand_sym(n: usize, s: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = rand_mat(n, n, s, rng);
    (&a + a.transpose()) * 0.5
}

pub fn rand_vec(n: usize, s: f64, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| s * randn(rng))
}

/// Random two-covariance model; `B` is rank-deficient one time in four.
pub fn random_plda(d: usize, rng: &mut impl Rng) -> GaussianPlda<f64> {
    let rank = if rng.random_range(0..4) == 0 && d > 1 {
        d - 1
    } else {
        d
    };
    let a = rand_mat(d, rank, 0.8, rng);
    let c = rand_mat(d, d, 0.4, rng);
    GaussianPlda {
        mean: rand_vec(d, 0.3, rng),
        between: &a * a.transpose(),
        within: &c * c.transpose() + DMatrix::identity(d, d) * 0.1,
    }
}

/// `log N(z; mu, sigma)` through an LU factorization.
pub fn log_gauss(z: &DVector<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let lu = sigma.clone().lu();
    let det = lu.determinant();
    let r = z - mu;
    let sol = lu.solve(&r).expect("singular covariance");
    -0.5 * (z.len() as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + r.dot(&sol))
}

/// Same-speaker versus different-speaker log-likelihood ratio of a pair,
/// evaluating both stacked Gaussian densities directly.
pub fn joint_gaussian_llr(plda: &GaussianPlda<f64>, x1: &DVector<f64>, x2: &DVector<f64>) -> f64 {
    let d = x1.len();
    let t = &plda.between + &plda.within;
    let mut same = DMatrix::zeros(2 * d, 2 * d);
    let mut diff = DMatrix::zeros(2 * d, 2 * d);
    for (blk, off) in [(&t, (0, 0)), (&t, (d, d))] {
        same.view_mut(off, (d, d)).copy_from(blk);
        diff.view_mut(off, (d, d)).copy_from(blk);
    }
    same.view_mut((0, d), (d, d)).copy_from(&plda.between);
    same.view_mut((d, 0), (d, d)).copy_from(&plda.between);
    let z = DVector::from_iterator(2 * d, x1.iter().chain(x2.iter()).copied());
    let mu = DVector::from_iterator(2 * d, plda.mean.iter().chain(plda.mean.iter()).copied());
    log_gauss(&z, &mu, &same) - log_gauss(&z, &mu, &diff)
}

/// A backend with every parameter random and nonzero.
pub fn random_model(big_d: usize, d: usize, use_gamma: bool, rng: &mut ChaCha8Rng) -> BackendModel {
    let r = 5;
    let mut meta = MetaCalibration {
        w: rand_mat(r, 10, 0.5, rng),
        lambda_a: rand_sym(r, 0.3, rng),
        gamma_a: rand_sym(r, 0.3, rng),
        c_a: rand_vec(r, 0.3, rng),
        k_a: 1.0 + 0.3 * randn(rng),
        lambda_b: rand_sym(r, 0.3, rng),
        gamma_b: rand_sym(r, 0.3, rng),
        c_b: rand_vec(r, 0.3, rng),
        k_b: 0.3 * randn(rng),
        use_gamma,
    };
    if !use_gamma {
        meta.gamma_a.fill(0.0);
        meta.gamma_b.fill(0.0);
    }
    BackendModel {
        proj: Projection {
            matrix: rand_mat(d, big_d, 1.0, rng),
            offset: rand_vec(d, 0.5, rng),
        },
        sf: ScoreForm {
            lambda: rand_sym(d, 1.0, rng),
            gamma: rand_sym(d, 0.5, rng),
            c: rand_vec(d, 0.5, rng),
            k: randn(rng),
        },
        meta,
        cnet: None,
        mode: CalMode::MetaCal,
        prior: 0.5,
    }
}

/// `n` segments in speaker pairs `(0,1), (2,3), ...`; every pair labelled.
pub fn random_batch(big_d: usize, n: usize, rng: &mut impl Rng) -> BatchInputs {
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            pairs.push((a, b, a / 2 == b / 2));
        }
    }
    BatchInputs {
        x: rand_mat(big_d, n, 1.0, rng),
        m: Some(rand_mat(10, n, 1.0, rng)),
        pairs,
    }
}

pub fn loss(model: &BackendModel, inp: &BatchInputs, prior: f64) -> f64 {
    batch_loss(model, inp, prior).unwrap().unwrap()
}

/// Largest relative error between the analytic gradient of `id` and
/// central differences with step `h`. Symmetric tensors are perturbed in
/// mirrored pairs, whose derivative is the sum of the two entries.
pub fn fd_relative_error(
    model: &BackendModel,
    inp: &BatchInputs,
    prior: f64,
    id: ParamId,
    h: f64,
) -> f64 {
    let (_, grads) = backward(model, inp, prior).unwrap().unwrap();
    let g = grads.get(id);
    let len = model.tensor(id).len();
    let n = (len as f64).sqrt().round() as usize;
    let mut worst: f64 = 0.0;
    for idx in 0..len {
        let mirror = if id.is_symmetric() {
            let (i, j) = (idx % n, idx / n);
            if i > j {
                continue;
            }
            Some(j + i * n)
        } else {
            None
        };
        let mut plus = model.clone();
        let mut minus = model.clone();
        for (m, s) in [(&mut plus, h), (&mut minus, -h)] {
            let t = m.tensor_mut(id);
            t[idx] += s;
            if let Some(k) = mirror.filter(|&k| k != idx) {
                t[k] += s;
            }
        }
        let fd = (loss(&plus, inp, prior) - loss(&minus, inp, prior)) / (2.0 * h);
        let an = match mirror {
            Some(k) if k != idx => g[idx] + g[k],
            _ => g[idx],
        };
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Eigenvalues of `Sw^-1 Sb` from the real Schur form of the unsymmetric
/// product, sorted descending.
pub fn generalized_eigenvalues(sb: &DMatrix<f64>, sw: &DMatrix<f64>) -> Vec<f64> {
    let prod = sw.clone().try_inverse().expect("singular within scatter") * sb;
    let mut ev: Vec<f64> = prod.complex_eigenvalues().iter().map(|c| c.re).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Between and within scatters with every speaker weighted equally, the
/// between scatter centred on the mean of speaker means.
pub fn speaker_scatters(groups: &[Vec<DVector<f64>>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = groups[0][0].len();
    let means: Vec<DVector<f64>> = groups
        .iter()
        .map(|g| g.iter().fold(DVector::zeros(d), |a, x| a + x) / g.len() as f64)
        .collect();
    let grand = means.iter().fold(DVector::zeros(d), |a, m| a + m) / means.len() as f64;
    let mut sb = DMatrix::zeros(d, d);
    let mut sw = DMatrix::zeros(d, d);
    for (g, m) in groups.iter().zip(&means) {
        let dm = m - &grand;
        sb += &dm * dm.transpose();
        let mut w = DMatrix::zeros(d, d);
        for x in g {
            let r = x - m;
            w += &r * r.transpose();
        }
        sw += w / g.len() as f64;
    }
    let k = groups.len() as f64;
    (sb / k, sw / k)
}
