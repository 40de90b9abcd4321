//! Affine score calibration, global and metadata-conditioned.

use nalgebra::{DMatrix, DVector, RealField};
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::softplus;

/// Dimension of the metadata vectors `z`.
pub const META_DIM: usize = 5;
/// Standard deviation of the random initialization of the metadata projection.
pub const META_INIT_STD: f64 = 0.5;

fn c<T: Float>(v: f64) -> T {
    T::from(v).unwrap()
}

pub fn logit<T: Float>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `l = alpha * s + beta`.
pub fn calibrate<T: Float>(raw_score: T, alpha: T, beta: T) -> T {
    alpha * raw_score + beta
}

/// Prior-weighted binary cross-entropy (natural log) of LLRs:
/// `-(pi/T) sum_tgt log q - ((1-pi)/N) sum_imp log(1-q)` with
/// `q = sigmoid(l + logit pi)`.
pub fn weighted_cross_entropy<T: Float>(llrs: &[(T, bool)], prior: T) -> Result<T> {
    let n_tgt = llrs.iter().filter(|s| s.1).count();
    let n_imp = llrs.len() - n_tgt;
    if n_tgt == 0 || n_imp == 0 {
        return Err(Error::invalid("cross-entropy needs both classes"));
    }
    let lp = logit(prior);
    let (mut tgt, mut imp) = (T::zero(), T::zero());
    for &(l, is_tgt) in llrs {
        if is_tgt {
            tgt = tgt + softplus(-(l + lp));
        } else {
            imp = imp + softplus(l + lp);
        }
    }
    Ok(prior * tgt / c(n_tgt as f64) + (T::one() - prior) * imp / c(n_imp as f64))
}

/// Scale and shift of a single affine calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalCalibration<T> {
    pub alpha: T,
    pub beta: T,
}

impl<T: Float> GlobalCalibration<T> {
    pub fn identity() -> Self {
        Self {
            alpha: T::one(),
            beta: T::zero(),
        }
    }

    pub fn apply(&self, raw_score: T) -> T {
        calibrate(raw_score, self.alpha, self.beta)
    }
}

/// Gradient-norm target of the Newton solver.
pub const CALIBRATION_TOL: f64 = 1e-9;
const MAX_NEWTON_ITERS: usize = 200;

/// Linear logistic regression minimizing the prior-weighted cross-entropy.
/// Newton's method with backtracking from `(0, 0)`; scores carrying no
/// information therefore yield `alpha = 0`.
pub fn train_global_calibration<T: Float>(
    scores: &[(T, bool)],
    prior: T,
) -> Result<GlobalCalibration<T>> {
    if !(prior > T::zero() && prior < T::one()) {
        return Err(Error::invalid("prior must lie in (0, 1)"));
    }
    let n_tgt = scores.iter().filter(|s| s.1).count();
    let n_imp = scores.len() - n_tgt;
    if n_tgt == 0 || n_imp == 0 {
        return Err(Error::invalid(format!(
            "calibration needs both classes (got {n_tgt} targets, {n_imp} impostors)"
        )));
    }
    let lp = logit(prior);
    let w_tgt = prior / c(n_tgt as f64);
    let w_imp = (T::one() - prior) / c(n_imp as f64);

    let objective = |a: T, b: T| -> T {
        scores.iter().fold(T::zero(), |acc, &(s, t)| {
            let x = a * s + b + lp;
            acc + if t {
                w_tgt * softplus(-x)
            } else {
                w_imp * softplus(x)
            }
        })
    };
    let derivs = |a: T, b: T| -> ([T; 2], [T; 3]) {
        let (mut g, mut h) = ([T::zero(); 2], [T::zero(); 3]);
        for &(s, t) in scores {
            let x = a * s + b + lp;
            let (d, w) = if t {
                (-w_tgt * sigmoid(-x), w_tgt)
            } else {
                (w_imp * sigmoid(x), w_imp)
            };
            let curv = w * sigmoid(x) * sigmoid(-x);
            g[0] = g[0] + d * s;
            g[1] = g[1] + d;
            h[0] = h[0] + curv * s * s;
            h[1] = h[1] + curv * s;
            h[2] = h[2] + curv;
        }
        (g, h)
    };

    let (mut a, mut b) = (T::zero(), T::zero());
    let mut f = objective(a, b);
    let tol: T = c(CALIBRATION_TOL);
    for _ in 0..MAX_NEWTON_ITERS {
        let (g, h) = derivs(a, b);
        if (g[0] * g[0] + g[1] * g[1]).sqrt() < tol {
            return Ok(GlobalCalibration { alpha: a, beta: b });
        }
        let det = h[0] * h[2] - h[1] * h[1];
        let (mut da, mut db) = if det > c::<T>(1e-300) && det.is_finite() {
            (
                -(h[2] * g[0] - h[1] * g[1]) / det,
                -(h[0] * g[1] - h[1] * g[0]) / det,
            )
        } else {
            (-g[0], -g[1])
        };
        let negligible = |d: T, x: T| d.abs() <= T::epsilon() * (T::one() + x.abs());
        if negligible(da, a) && negligible(db, b) {
            return Ok(GlobalCalibration { alpha: a, beta: b });
        }
        // Near the optimum the objective only changes in its last bits, so
        // allow rounding-level increases instead of backtracking forever.
        let slack = f.abs() * c(1e-13);
        let mut step_ok = false;
        for _ in 0..60 {
            let fa = objective(a + da, b + db);
            if fa <= f + slack {
                a = a + da;
                b = b + db;
                f = fa;
                step_ok = true;
                break;
            }
            da = da * c(0.5);
            db = db * c(0.5);
        }
        if !step_ok {
            break;
        }
    }
    log::debug!("calibration stopped before reaching the gradient tolerance");
    Ok(GlobalCalibration { alpha: a, beta: b })
}

/// Metadata-conditioned calibration: scale and shift are symmetric quadratic
/// forms in the metadata vectors `z = log softmax(W m)` of the two sides.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaCalibration<T: RealField> {
    /// `META_DIM x bottleneck`.
    pub w: DMatrix<T>,
    pub lambda_a: DMatrix<T>,
    pub gamma_a: DMatrix<T>,
    pub c_a: DVector<T>,
    pub k_a: T,
    pub lambda_b: DMatrix<T>,
    pub gamma_b: DMatrix<T>,
    pub c_b: DVector<T>,
    pub k_b: T,
    /// When false the own-side quadratic terms are held at zero.
    pub use_gamma: bool,
}

impl<T: RealField + Copy> MetaCalibration<T> {
    /// Every coefficient zero except `k_a = alpha`, `k_b = beta`.
    pub fn from_global(global: GlobalCalibration<T>, w: DMatrix<T>, use_gamma: bool) -> Self {
        let r = w.nrows();
        Self {
            w,
            lambda_a: DMatrix::zeros(r, r),
            gamma_a: DMatrix::zeros(r, r),
            c_a: DVector::zeros(r),
            k_a: global.alpha,
            lambda_b: DMatrix::zeros(r, r),
            gamma_b: DMatrix::zeros(r, r),
            c_b: DVector::zeros(r),
            k_b: global.beta,
            use_gamma,
        }
    }

    pub fn meta_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn bottleneck_dim(&self) -> usize {
        self.w.ncols()
    }

    /// `z = log softmax(W m)`.
    pub fn metadata_vector(&self, m: &DVector<T>) -> DVector<T> {
        log_softmax(&self.w * m)
    }

    /// `(alpha, beta)` for a trial; exactly symmetric in `(z1, z2)`.
    pub fn conditioned_alpha_beta(&self, z1: &DVector<T>, z2: &DVector<T>) -> (T, T) {
        let alpha = sym_quadratic(&self.lambda_a, &self.gamma_a, &self.c_a, self.k_a, z1, z2);
        let beta = sym_quadratic(&self.lambda_b, &self.gamma_b, &self.c_b, self.k_b, z1, z2);
        (alpha, beta)
    }

    pub fn global(&self) -> GlobalCalibration<T> {
        GlobalCalibration {
            alpha: self.k_a,
            beta: self.k_b,
        }
    }
}

impl MetaCalibration<f64> {
    /// Zero coefficients, `k` from the global calibration, and `W` drawn
    /// entrywise from `N(0, 0.5^2)`.
    pub fn initialize(
        global: GlobalCalibration<f64>,
        bottleneck_dim: usize,
        use_gamma: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, META_INIT_STD).unwrap();
        let w = DMatrix::from_fn(META_DIM, bottleneck_dim, |_, _| normal.sample(rng));
        Self::from_global(global, w, use_gamma)
    }
}

fn sym_quadratic<T: RealField + Copy>(
    lambda: &DMatrix<T>,
    gamma: &DMatrix<T>,
    lin: &DVector<T>,
    k: T,
    z1: &DVector<T>,
    z2: &DVector<T>,
) -> T {
    let cross = z1.dot(&(lambda * z2)) + z2.dot(&(lambda * z1));
    let own = z1.dot(&(gamma * z1)) + z2.dot(&(gamma * z2));
    cross + own + (z1 + z2).dot(lin) + k
}

pub fn log_softmax<T: RealField + Copy>(u: DVector<T>) -> DVector<T> {
    let max = u.iter().copied().fold(u[0], |a, b| a.max(b));
    let lse = max
        + u.iter()
            .fold(T::zero(), |acc, &v| acc + (v - max).exp())
            .ln();
    u.map(|v| v - lse)
}

pub fn softmax<T: RealField + Copy>(u: &DVector<T>) -> DVector<T> {
    log_softmax(u.clone()).map(|v| v.exp())
}

/// `log sum exp` of a vector, for checking log-simplex membership.
pub fn log_sum_exp<T: RealField + Copy>(z: &DVector<T>) -> T {
    let max = z.iter().copied().fold(z[0], |a, b| a.max(b));
    max + z
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - max).exp())
        .ln()
}
