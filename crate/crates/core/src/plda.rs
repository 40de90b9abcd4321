//! LDA projection, length normalization, two-covariance PLDA and its
//! closed-form pairwise score.
//!
//! The generative model is `x = m + y + e` with speaker factor
//! `y ~ N(0, B)` and residual `e ~ N(0, W)`. For a pair of vectors the
//! same-speaker and different-speaker hypotheses are both joint Gaussians,
//! so their log-likelihood ratio is a quadratic form
//!
//! ```text
//! s = 2 x1' L x2 + x1' G x1 + x2' G x2 + (x1 + x2)' c + k
//! ```
//!
//! with coefficients computed by [`to_score_form`].

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use nalgebra::{convert, DMatrix, DVector, RealField};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{
    floor_eigenvalues, ridge_if_ill_conditioned, spd_inverse, spd_log_det, symmetrize,
};

/// Affine map applied before length normalization: `P x + mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T: RealField> {
    /// `d_lda x D`.
    pub matrix: DMatrix<T>,
    /// Post-projection offset, `-P * global_mean` after LDA training.
    pub offset: DVector<T>,
}

impl<T: RealField + Copy> Projection<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
            offset: DVector::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn project(&self, x: &DVector<T>) -> DVector<T> {
        &self.matrix * x + &self.offset
    }

    /// `Norm(P x + mu)`.
    pub fn project_normalize(&self, x: &DVector<T>) -> Result<DVector<T>> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "embedding has dimension {}, projection expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        length_normalize(self.project(x))
    }
}

/// Scales `v` to unit Euclidean norm.
pub fn length_normalize<T: RealField + Copy>(v: DVector<T>) -> Result<DVector<T>> {
    let norm = v.norm();
    if norm <= T::zero() || !norm.is_finite() {
        return Err(Error::Numeric(
            "cannot length-normalize a zero vector".into(),
        ));
    }
    Ok(v / norm)
}

/// Projects and normalizes every record of a dataset, naming the offending
/// segment on failure.
pub fn project_dataset(proj: &Projection<f64>, dataset: &Dataset) -> Result<Vec<DVector<f64>>> {
    dataset
        .records()
        .iter()
        .map(|r| {
            proj.project_normalize(&DVector::from_column_slice(&r.embedding))
                .map_err(|e| match e {
                    Error::Numeric(_) => Error::Numeric(format!(
                        "segment `{}` projects to the zero vector",
                        r.segment_id
                    )),
                    other => other,
                })
        })
        .collect()
}

/// Result of LDA training: the projection plus the generalized eigenvalues
/// of the kept directions, descending.
#[derive(Debug, Clone)]
pub struct LdaFit<T: RealField> {
    pub projection: Projection<T>,
    pub eigenvalues: Vec<T>,
}

/// Between- and within-class scatter with every speaker weighted equally.
/// Returns `(between, within, global_mean)`.
pub fn class_scatter<T: RealField + Copy>(
    dataset: &Dataset,
) -> (DMatrix<T>, DMatrix<T>, DVector<T>) {
    let dim = dataset.dim();
    let groups = dataset.by_speaker();
    let to_vec = |i: usize| -> DVector<T> {
        DVector::from_iterator(
            dim,
            dataset.records()[i].embedding.iter().map(|&v| convert(v)),
        )
    };
    let mut global = DVector::<T>::zeros(dim);
    for i in 0..dataset.len() {
        global += to_vec(i);
    }
    global /= convert::<f64, T>(dataset.len() as f64);

    let n_spk: T = convert(groups.len() as f64);
    let mut means = Vec::with_capacity(groups.len());
    let mut within = DMatrix::<T>::zeros(dim, dim);
    for idx in groups.values() {
        let n: T = convert(idx.len() as f64);
        let mut mean = DVector::<T>::zeros(dim);
        for &i in idx {
            mean += to_vec(i);
        }
        mean /= n;
        let mut cov = DMatrix::<T>::zeros(dim, dim);
        for &i in idx {
            let d = to_vec(i) - &mean;
            cov.ger(T::one(), &d, &d, T::one());
        }
        within += cov / n;
        means.push(mean);
    }
    within /= n_spk;
    let mut mean_of_means = DVector::<T>::zeros(dim);
    for m in &means {
        mean_of_means += m;
    }
    mean_of_means /= n_spk;
    let mut between = DMatrix::<T>::zeros(dim, dim);
    for m in &means {
        let d = m - &mean_of_means;
        between.ger(T::one(), &d, &d, T::one());
    }
    between /= n_spk;
    symmetrize(&mut between);
    symmetrize(&mut within);
    (between, within, global)
}

pub fn train_lda<T: RealField + Copy>(dataset: &Dataset, d_lda: usize) -> Result<Projection<T>> {
    train_lda_fit(dataset, d_lda).map(|f| f.projection)
}

/// Top `d_lda` generalized eigenvectors of between- vs within-class scatter.
/// Rows are scaled so that `v' Sw v = 1` and signed so their largest-magnitude
/// entry is positive.
pub fn train_lda_fit<T: RealField + Copy>(dataset: &Dataset, d_lda: usize) -> Result<LdaFit<T>> {
    let n_spk = dataset.speakers().len();
    if n_spk < 2 {
        return Err(Error::invalid("LDA needs at least two speakers"));
    }
    let dim = dataset.dim();
    if d_lda == 0 || d_lda > dim.min(n_spk - 1) {
        return Err(Error::invalid(format!(
            "LDA dimension {d_lda} must be in 1..={} (D = {dim}, {n_spk} speakers)",
            dim.min(n_spk - 1)
        )));
    }
    let (between, mut within, global) = class_scatter::<T>(dataset);
    let fallback = between.trace() / convert(dim as f64);
    if ridge_if_ill_conditioned(&mut within, fallback.max(convert(1.0))) {
        log::warn!("within-class scatter is ill-conditioned; ridge added");
    }
    let chol = within
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("within-class scatter is not positive definite".into()))?;
    let l = chol.l();
    // C = L^-1 Sb L^-T
    let linv_sb = l
        .solve_lower_triangular(&between)
        .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
    let mut c = l
        .solve_lower_triangular(&linv_sb.transpose())
        .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
    symmetrize(&mut c);
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let lt = l.transpose();
    let mut matrix = DMatrix::<T>::zeros(d_lda, dim);
    let mut eigenvalues = Vec::with_capacity(d_lda);
    for (row, &k) in order.iter().take(d_lda).enumerate() {
        let u = eig.eigenvectors.column(k).into_owned();
        let mut v = lt
            .solve_upper_triangular(&u)
            .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
        let pivot = v.iter().copied().fold(
            T::zero(),
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        if pivot < T::zero() {
            v = -v;
        }
        matrix.set_row(row, &v.transpose());
        eigenvalues.push(eig.eigenvalues[k]);
    }
    let offset = -(&matrix * global);
    Ok(LdaFit {
        projection: Projection { matrix, offset },
        eigenvalues,
    })
}

/// Two-covariance PLDA parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPlda<T: RealField> {
    pub mean: DVector<T>,
    /// Between-speaker covariance.
    pub between: DMatrix<T>,
    /// Within-speaker covariance.
    pub within: DMatrix<T>,
}

/// EM result with the marginal log-likelihood of the training data before
/// the first iteration (index 0) and after each iteration.
#[derive(Debug, Clone)]
pub struct PldaEmFit<T: RealField> {
    pub model: GaussianPlda<T>,
    pub log_likelihood: Vec<T>,
}

struct SpeakerStats<T: RealField> {
    n: usize,
    /// Sum of centered vectors.
    sum: DVector<T>,
    /// Sum of `x' W^-1 x` is recomputed per iteration from the scatter.
    scatter: DMatrix<T>,
}

pub fn train_plda_em<T: RealField + Copy>(
    vectors: &[(DVector<T>, &str)],
    iters: usize,
) -> Result<GaussianPlda<T>> {
    train_plda_em_fit(vectors, iters).map(|f| f.model)
}

/// Fits the two-covariance model by EM. The mean is the global mean and is
/// held fixed; `within` is floored at `1e-6 * trace(total)/d` so a speaker
/// set without within-class variation cannot drive it to zero.
pub fn train_plda_em_fit<T: RealField + Copy>(
    vectors: &[(DVector<T>, &str)],
    iters: usize,
) -> Result<PldaEmFit<T>> {
    if iters == 0 {
        return Err(Error::invalid("EM needs at least one iteration"));
    }
    let dim = vectors
        .first()
        .map(|v| v.0.len())
        .ok_or_else(|| Error::invalid("no training vectors"))?;
    if vectors.iter().any(|v| v.0.len() != dim) {
        return Err(Error::invalid("training vectors differ in dimension"));
    }
    let mut groups: BTreeMap<&str, Vec<&DVector<T>>> = BTreeMap::new();
    for (v, s) in vectors {
        groups.entry(s).or_default().push(v);
    }
    if groups.len() < 2 {
        return Err(Error::invalid("PLDA needs at least two speakers"));
    }
    if let Some((s, _)) = groups.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::invalid(format!(
            "speaker `{s}` has fewer than two vectors"
        )));
    }

    let total_n: T = convert(vectors.len() as f64);
    let mut mean = DVector::<T>::zeros(dim);
    for (v, _) in vectors {
        mean += v;
    }
    mean /= total_n;

    let stats: Vec<SpeakerStats<T>> = groups
        .values()
        .map(|vs| {
            let mut sum = DVector::zeros(dim);
            let mut scatter = DMatrix::zeros(dim, dim);
            for v in vs {
                let c = *v - &mean;
                scatter.ger(T::one(), &c, &c, T::one());
                sum += c;
            }
            SpeakerStats {
                n: vs.len(),
                sum,
                scatter,
            }
        })
        .collect();
    let mut total_scatter = DMatrix::<T>::zeros(dim, dim);
    for s in &stats {
        total_scatter += &s.scatter;
    }
    let total_cov = &total_scatter / total_n;
    let d: T = convert(dim as f64);
    let scale = (total_cov.trace() / d).max(convert(f64::MIN_POSITIVE));
    let within_floor = scale * convert(1e-6);

    // Initial guess: covariance of speaker means and pooled within scatter.
    let n_spk: T = convert(stats.len() as f64);
    let mut between = DMatrix::<T>::zeros(dim, dim);
    let mut within = total_scatter.clone();
    for s in &stats {
        let n: T = convert(s.n as f64);
        let mbar = &s.sum / n;
        between.ger(T::one(), &mbar, &mbar, T::one());
        within.ger(-n, &mbar, &mbar, T::one());
    }
    between /= n_spk;
    within /= total_n;
    symmetrize(&mut between);
    symmetrize(&mut within);
    regularize_within(&mut within, within_floor, scale);

    let mut model = GaussianPlda {
        mean,
        between,
        within,
    };
    let mut ll = vec![marginal_log_likelihood(&model, &stats)?];
    for _ in 0..iters {
        em_step(
            &mut model,
            &stats,
            total_n,
            &total_scatter,
            within_floor,
            scale,
        )?;
        ll.push(marginal_log_likelihood(&model, &stats)?);
    }
    Ok(PldaEmFit {
        model,
        log_likelihood: ll,
    })
}

fn regularize_within<T: RealField + Copy>(within: &mut DMatrix<T>, floor: T, scale: T) {
    if ridge_if_ill_conditioned(within, scale) {
        log::warn!("within-speaker covariance ill-conditioned; ridge added");
    }
    if floor_eigenvalues(within, floor) {
        log::warn!("within-speaker covariance hit its eigenvalue floor");
    }
}

/// Posterior gain `K = B (B + W/n)^-1` and covariance `B - K B` for a
/// speaker with `n` vectors. Equivalent to the precision form
/// `(B^-1 + n W^-1)^-1` but valid for singular `B`.
fn posterior_terms<T: RealField + Copy>(
    model: &GaussianPlda<T>,
    n: usize,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let nn: T = convert(n as f64);
    let mut s = &model.between + &model.within / nn;
    symmetrize(&mut s);
    let s_inv = spd_inverse(&s, "B + W/n")?;
    let gain = &model.between * s_inv;
    let mut cov = &model.between - &gain * &model.between;
    symmetrize(&mut cov);
    Ok((gain, cov))
}

fn em_step<T: RealField + Copy>(
    model: &mut GaussianPlda<T>,
    stats: &[SpeakerStats<T>],
    total_n: T,
    total_scatter: &DMatrix<T>,
    within_floor: T,
    scale: T,
) -> Result<()> {
    let dim = model.mean.len();
    let mut cache: BTreeMap<usize, (DMatrix<T>, DMatrix<T>)> = BTreeMap::new();
    let mut between = DMatrix::<T>::zeros(dim, dim);
    let mut within = total_scatter.clone();
    for s in stats {
        let (gain, cov) = &*match cache.entry(s.n) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(posterior_terms(model, s.n)?),
        };
        let n: T = convert(s.n as f64);
        let y = gain * (&s.sum / n);
        between.ger(T::one(), &y, &y, T::one());
        between += cov;
        // sum_i (x_i - y)(x_i - y)' = S - f y' - y f' + n y y'
        within.ger(-T::one(), &s.sum, &y, T::one());
        within.ger(-T::one(), &y, &s.sum, T::one());
        within.ger(n, &y, &y, T::one());
        within += cov * n;
    }
    between /= convert::<f64, T>(stats.len() as f64);
    within /= total_n;
    symmetrize(&mut between);
    symmetrize(&mut within);
    // B only needs to stay PSD.
    floor_eigenvalues(&mut between, T::zero());
    regularize_within(&mut within, within_floor, scale);
    model.between = between;
    model.within = within;
    Ok(())
}

/// Exact marginal log-likelihood using the block structure of each speaker's
/// stacked covariance `I (x) W + 11' (x) B`.
fn marginal_log_likelihood<T: RealField + Copy>(
    model: &GaussianPlda<T>,
    stats: &[SpeakerStats<T>],
) -> Result<T> {
    let w_inv = spd_inverse(&model.within, "within covariance")?;
    let w_logdet = spd_log_det(&model.within, "within covariance")?;
    let dim = model.mean.len();
    let log_2pi: T = convert((2.0 * std::f64::consts::PI).ln());
    let half: T = convert(0.5);
    let mut cache: BTreeMap<usize, (DMatrix<T>, T)> = BTreeMap::new();
    let mut total = T::zero();
    for s in stats {
        let (wb_inv, wb_logdet) = &*match cache.entry(s.n) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let nn: T = convert(s.n as f64);
                let mut wb = &model.within + &model.between * nn;
                symmetrize(&mut wb);
                e.insert((spd_inverse(&wb, "W + nB")?, spd_log_det(&wb, "W + nB")?))
            }
        };
        let n: T = convert(s.n as f64);
        let nd: T = convert((s.n * dim) as f64);
        let logdet = (n - T::one()) * w_logdet + *wb_logdet;
        let quad = w_inv.component_mul(&s.scatter).sum() - s.sum.dot(&(&w_inv * &s.sum)) / n
            + s.sum.dot(&(wb_inv * &s.sum)) / n;
        total -= half * (nd * log_2pi + logdet + quad);
    }
    Ok(total)
}

/// Marginal log-likelihood of grouped vectors under `model`.
pub fn log_likelihood<T: RealField + Copy>(
    model: &GaussianPlda<T>,
    vectors: &[(DVector<T>, &str)],
) -> Result<T> {
    let dim = model.mean.len();
    let mut groups: BTreeMap<&str, Vec<&DVector<T>>> = BTreeMap::new();
    for (v, s) in vectors {
        groups.entry(s).or_default().push(v);
    }
    let stats: Vec<_> = groups
        .values()
        .map(|vs| {
            let mut sum = DVector::zeros(dim);
            let mut scatter = DMatrix::zeros(dim, dim);
            for v in vs {
                let c = *v - &model.mean;
                scatter.ger(T::one(), &c, &c, T::one());
                sum += c;
            }
            SpeakerStats {
                n: vs.len(),
                sum,
                scatter,
            }
        })
        .collect();
    marginal_log_likelihood(model, &stats)
}

/// Coefficients of the pairwise quadratic score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreForm<T: RealField> {
    pub lambda: DMatrix<T>,
    pub gamma: DMatrix<T>,
    pub c: DVector<T>,
    pub k: T,
}

impl<T: RealField + Copy> ScoreForm<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            lambda: DMatrix::zeros(dim, dim),
            gamma: DMatrix::zeros(dim, dim),
            c: DVector::zeros(dim),
            k: T::zero(),
        }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// Score of one trial. Exactly symmetric in its arguments: the cross term
    /// is evaluated from both sides and summed.
    pub fn score(&self, x1: &DVector<T>, x2: &DVector<T>) -> Result<T> {
        let d = self.dim();
        if x1.len() != d || x2.len() != d {
            return Err(Error::invalid(format!(
                "score form has dimension {d}, got vectors of {} and {}",
                x1.len(),
                x2.len()
            )));
        }
        Ok(self.score_unchecked(x1, x2))
    }

    pub(crate) fn score_unchecked(&self, x1: &DVector<T>, x2: &DVector<T>) -> T {
        let cross = x1.dot(&(&self.lambda * x2)) + x2.dot(&(&self.lambda * x1));
        let own = x1.dot(&(&self.gamma * x1)) + x2.dot(&(&self.gamma * x2));
        let lin = (x1 + x2).dot(&self.c);
        cross + own + lin + self.k
    }
}

/// Free function form of [`ScoreForm::score`].
pub fn score_trial<T: RealField + Copy>(
    x1: &DVector<T>,
    x2: &DVector<T>,
    sf: &ScoreForm<T>,
) -> Result<T> {
    sf.score(x1, x2)
}

/// Converts PLDA parameters to the pairwise score form.
///
/// With `T = B + W` and `M = T - B T^-1 B`:
/// `G = (T^-1 - M^-1)/2`, `L = T^-1 B M^-1 / 2`,
/// `k0 = log det T - log det [[T, B], [B, T]] / 2`; the mean is then
/// absorbed as `c = -2 (L + G) m`, `k = k0 + 2 m' (L + G) m`.
pub fn to_score_form<T: RealField + Copy>(plda: &GaussianPlda<T>) -> Result<ScoreForm<T>> {
    let dim = plda.mean.len();
    let mut total = &plda.between + &plda.within;
    symmetrize(&mut total);
    let total_inv = spd_inverse(&total, "total covariance")?;
    let mut m = &total - &plda.between * &total_inv * &plda.between;
    symmetrize(&mut m);
    let m_inv = spd_inverse(&m, "conditional covariance")?;
    let half: T = convert(0.5);
    let two: T = convert(2.0);
    let mut gamma = (&total_inv - &m_inv) * half;
    symmetrize(&mut gamma);
    let mut lambda = &total_inv * &plda.between * &m_inv * half;
    symmetrize(&mut lambda);

    // log det [[T, B], [B, T]] = log det T + log det M (Schur complement).
    let logdet_t = spd_log_det(&total, "total covariance")?;
    let logdet_m = spd_log_det(&m, "conditional covariance")?;
    let k0 = logdet_t - half * (logdet_t + logdet_m);

    let lg = &lambda + &gamma;
    let lg_m = &lg * &plda.mean;
    let c = &lg_m * (-two);
    let k = k0 + two * plda.mean.dot(&lg_m);
    debug_assert_eq!(c.len(), dim);
    Ok(ScoreForm {
        lambda,
        gamma,
        c,
        k,
    })
}
