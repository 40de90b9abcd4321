//! Discriminative joint training of the whole backend.
//!
//! The model keeps the functional form of the generative pipeline
//! (projection, length normalization, pairwise quadratic score, affine
//! calibration) and optionally conditions the calibration on metadata
//! vectors derived from a frozen condition network. All parameters are
//! initialized from the generative recipe and then fine-tuned with Adam on
//! the prior-weighted cross-entropy of in-batch trials.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    logit, sigmoid, train_global_calibration, GlobalCalibration, MetaCalibration,
};
use crate::condition_net::{embedding_matrix, ConditionNet, BOTTLENECK_DIM};
use crate::data::{build_trials, Dataset, ScoreSet, Trial, TrialLabel, TrialPolicy};
use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::metrics::{self, softplus};
use crate::optim::{Adam, AdamConfig};
use crate::plda::{
    project_dataset, to_score_form, train_lda, train_plda_em, Projection, ScoreForm,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalMode {
    /// Scalar calibration: only `k_a`, `k_b` act, as `alpha`, `beta`.
    GlobalCal,
    /// Metadata-conditioned calibration.
    MetaCal,
}

impl CalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CalMode::GlobalCal => "global_cal",
            CalMode::MetaCal => "meta_cal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "global_cal" => Some(CalMode::GlobalCal),
            "meta_cal" => Some(CalMode::MetaCal),
            _ => None,
        }
    }
}

/// Every trainable parameter of the backend plus the frozen condition net.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendModel {
    pub proj: Projection<f64>,
    pub sf: ScoreForm<f64>,
    pub meta: MetaCalibration<f64>,
    /// Required in `MetaCal` mode.
    pub cnet: Option<ConditionNet>,
    pub mode: CalMode,
    pub prior: f64,
}

/// Trainable tensors in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Projection,
    Offset,
    Lambda,
    Gamma,
    C,
    K,
    MetaW,
    LambdaA,
    GammaA,
    CA,
    KA,
    LambdaB,
    GammaB,
    CB,
    KB,
}

impl ParamId {
    pub const ALL: [ParamId; 15] = [
        ParamId::Projection,
        ParamId::Offset,
        ParamId::Lambda,
        ParamId::Gamma,
        ParamId::C,
        ParamId::K,
        ParamId::MetaW,
        ParamId::LambdaA,
        ParamId::GammaA,
        ParamId::CA,
        ParamId::KA,
        ParamId::LambdaB,
        ParamId::GammaB,
        ParamId::CB,
        ParamId::KB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::Projection => "proj.matrix",
            ParamId::Offset => "proj.offset",
            ParamId::Lambda => "score.lambda",
            ParamId::Gamma => "score.gamma",
            ParamId::C => "score.c",
            ParamId::K => "score.k",
            ParamId::MetaW => "meta.w",
            ParamId::LambdaA => "meta.lambda_a",
            ParamId::GammaA => "meta.gamma_a",
            ParamId::CA => "meta.c_a",
            ParamId::KA => "meta.k_a",
            ParamId::LambdaB => "meta.lambda_b",
            ParamId::GammaB => "meta.gamma_b",
            ParamId::CB => "meta.c_b",
            ParamId::KB => "meta.k_b",
        }
    }

    /// Parameters upstream of the raw score.
    pub fn is_score_path(self) -> bool {
        matches!(
            self,
            ParamId::Projection
                | ParamId::Offset
                | ParamId::Lambda
                | ParamId::Gamma
                | ParamId::C
                | ParamId::K
        )
    }

    pub fn is_symmetric(self) -> bool {
        matches!(
            self,
            ParamId::Lambda
                | ParamId::Gamma
                | ParamId::LambdaA
                | ParamId::GammaA
                | ParamId::LambdaB
                | ParamId::GammaB
        )
    }
}

impl BackendModel {
    pub fn tensor(&self, id: ParamId) -> &[f64] {
        match id {
            ParamId::Projection => self.proj.matrix.as_slice(),
            ParamId::Offset => self.proj.offset.as_slice(),
            ParamId::Lambda => self.sf.lambda.as_slice(),
            ParamId::Gamma => self.sf.gamma.as_slice(),
            ParamId::C => self.sf.c.as_slice(),
            ParamId::K => std::slice::from_ref(&self.sf.k),
            ParamId::MetaW => self.meta.w.as_slice(),
            ParamId::LambdaA => self.meta.lambda_a.as_slice(),
            ParamId::GammaA => self.meta.gamma_a.as_slice(),
            ParamId::CA => self.meta.c_a.as_slice(),
            ParamId::KA => std::slice::from_ref(&self.meta.k_a),
            ParamId::LambdaB => self.meta.lambda_b.as_slice(),
            ParamId::GammaB => self.meta.gamma_b.as_slice(),
            ParamId::CB => self.meta.c_b.as_slice(),
            ParamId::KB => std::slice::from_ref(&self.meta.k_b),
        }
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut [f64] {
        match id {
            ParamId::Projection => self.proj.matrix.as_mut_slice(),
            ParamId::Offset => self.proj.offset.as_mut_slice(),
            ParamId::Lambda => self.sf.lambda.as_mut_slice(),
            ParamId::Gamma => self.sf.gamma.as_mut_slice(),
            ParamId::C => self.sf.c.as_mut_slice(),
            ParamId::K => std::slice::from_mut(&mut self.sf.k),
            ParamId::MetaW => self.meta.w.as_mut_slice(),
            ParamId::LambdaA => self.meta.lambda_a.as_mut_slice(),
            ParamId::GammaA => self.meta.gamma_a.as_mut_slice(),
            ParamId::CA => self.meta.c_a.as_mut_slice(),
            ParamId::KA => std::slice::from_mut(&mut self.meta.k_a),
            ParamId::LambdaB => self.meta.lambda_b.as_mut_slice(),
            ParamId::GammaB => self.meta.gamma_b.as_mut_slice(),
            ParamId::CB => self.meta.c_b.as_mut_slice(),
            ParamId::KB => std::slice::from_mut(&mut self.meta.k_b),
        }
    }

    /// Several distinct tensors borrowed mutably at once, in `ids` order.
    fn tensors_mut(&mut self, ids: &[ParamId]) -> Vec<&mut [f64]> {
        let BackendModel { proj, sf, meta, .. } = self;
        let mut all: BTreeMap<ParamId, &mut [f64]> = BTreeMap::new();
        all.insert(ParamId::Projection, proj.matrix.as_mut_slice());
        all.insert(ParamId::Offset, proj.offset.as_mut_slice());
        all.insert(ParamId::Lambda, sf.lambda.as_mut_slice());
        all.insert(ParamId::Gamma, sf.gamma.as_mut_slice());
        all.insert(ParamId::C, sf.c.as_mut_slice());
        all.insert(ParamId::K, std::slice::from_mut(&mut sf.k));
        all.insert(ParamId::MetaW, meta.w.as_mut_slice());
        all.insert(ParamId::LambdaA, meta.lambda_a.as_mut_slice());
        all.insert(ParamId::GammaA, meta.gamma_a.as_mut_slice());
        all.insert(ParamId::CA, meta.c_a.as_mut_slice());
        all.insert(ParamId::KA, std::slice::from_mut(&mut meta.k_a));
        all.insert(ParamId::LambdaB, meta.lambda_b.as_mut_slice());
        all.insert(ParamId::GammaB, meta.gamma_b.as_mut_slice());
        all.insert(ParamId::CB, meta.c_b.as_mut_slice());
        all.insert(ParamId::KB, std::slice::from_mut(&mut meta.k_b));
        ids.iter()
            .map(|id| all.remove(id).expect("duplicate parameter id"))
            .collect()
    }

    /// Parameters that influence the output in the current mode.
    pub fn active_params(&self) -> Vec<ParamId> {
        ParamId::ALL
            .iter()
            .copied()
            .filter(|&id| match id {
                ParamId::KA | ParamId::KB => true,
                ParamId::GammaA | ParamId::GammaB => {
                    self.mode == CalMode::MetaCal && self.meta.use_gamma
                }
                id if id.is_score_path() => true,
                _ => self.mode == CalMode::MetaCal,
            })
            .collect()
    }

    pub fn check_consistency(&self) -> Result<()> {
        let d = self.proj.output_dim();
        if self.sf.dim() != d || self.sf.lambda.shape() != (d, d) || self.sf.gamma.shape() != (d, d)
        {
            return Err(Error::invalid(
                "score form does not match projection dimension",
            ));
        }
        if self.mode == CalMode::MetaCal {
            let cnet = self
                .cnet
                .as_ref()
                .ok_or_else(|| Error::invalid("meta_cal mode needs a condition net"))?;
            if cnet.input_dim() != self.proj.input_dim() {
                return Err(Error::invalid(
                    "condition net input dimension differs from embeddings",
                ));
            }
            if self.meta.bottleneck_dim() != BOTTLENECK_DIM {
                return Err(Error::invalid(
                    "metadata projection has the wrong input size",
                ));
            }
        }
        if !self.meta.use_gamma
            && (self.meta.gamma_a.iter().any(|&v| v != 0.0)
                || self.meta.gamma_b.iter().any(|&v| v != 0.0))
        {
            return Err(Error::invalid("gamma terms must be zero when disabled"));
        }
        Ok(())
    }

    /// Per-segment quantities needed to score any trial among `dataset`.
    pub fn prepare(&self, dataset: &Dataset) -> Result<Features> {
        if dataset.dim() != self.proj.input_dim() {
            return Err(Error::invalid(format!(
                "dataset dimension {} does not match model input {}",
                dataset.dim(),
                self.proj.input_dim()
            )));
        }
        let xt = project_dataset(&self.proj, dataset)?;
        let m = match (&self.mode, &self.cnet) {
            (CalMode::MetaCal, Some(cnet)) => {
                Some(cnet.bottleneck_batch(&embedding_matrix(dataset))?)
            }
            (CalMode::MetaCal, None) => {
                return Err(Error::invalid("meta_cal mode needs a condition net"))
            }
            _ => None,
        };
        Ok(Features::new(self, xt, m.as_ref()))
    }

    /// Raw scores and LLRs for `trials` over segments of `dataset`.
    pub fn score_trials(&self, dataset: &Dataset, trials: &[Trial]) -> Result<ScoreSet> {
        let feats = self.prepare(dataset)?;
        let mut raw = Vec::with_capacity(trials.len());
        let mut llr = Vec::with_capacity(trials.len());
        for t in trials {
            let i = dataset
                .position(&t.enroll_id)
                .ok_or_else(|| Error::UnknownSegment(t.enroll_id.clone()))?;
            let j = dataset
                .position(&t.test_id)
                .ok_or_else(|| Error::UnknownSegment(t.test_id.clone()))?;
            if i == j {
                return Err(Error::invalid(format!(
                    "trial pairs segment `{}` with itself",
                    t.enroll_id
                )));
            }
            let (s, a, b) = feats.pair(self, i, j);
            if !(s.is_finite() && (a * s + b).is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite score for trial {} / {}",
                    t.enroll_id, t.test_id
                )));
            }
            raw.push(s);
            llr.push(a * s + b);
        }
        Ok(ScoreSet {
            trials: trials.to_vec(),
            raw_score: raw,
            llr: Some(llr),
        })
    }
}

/// Cached per-segment terms: normalized vectors with their score-form
/// products, and metadata vectors with theirs.
#[derive(Debug, Clone)]
pub struct Features {
    pub xt: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
    q: Vec<f64>,
    meta: Option<MetaFeatures>,
}

#[derive(Debug, Clone)]
struct MetaFeatures {
    z: Vec<DVector<f64>>,
    ua: Vec<DVector<f64>>,
    qa: Vec<f64>,
    ub: Vec<DVector<f64>>,
    qb: Vec<f64>,
}

impl Features {
    fn new(model: &BackendModel, xt: Vec<DVector<f64>>, m: Option<&DMatrix<f64>>) -> Self {
        let sf = &model.sf;
        let u: Vec<_> = xt.iter().map(|x| &sf.lambda * x).collect();
        let q: Vec<_> = xt
            .iter()
            .map(|x| x.dot(&(&sf.gamma * x)) + x.dot(&sf.c))
            .collect();
        let meta = m.map(|m| {
            let mc = &model.meta;
            let z: Vec<_> = m
                .column_iter()
                .map(|col| mc.metadata_vector(&col.into_owned()))
                .collect();
            MetaFeatures {
                ua: z.iter().map(|z| &mc.lambda_a * z).collect(),
                qa: z
                    .iter()
                    .map(|z| z.dot(&(&mc.gamma_a * z)) + z.dot(&mc.c_a))
                    .collect(),
                ub: z.iter().map(|z| &mc.lambda_b * z).collect(),
                qb: z
                    .iter()
                    .map(|z| z.dot(&(&mc.gamma_b * z)) + z.dot(&mc.c_b))
                    .collect(),
                z,
            }
        });
        Self { xt, u, q, meta }
    }

    pub fn z(&self, i: usize) -> Option<&DVector<f64>> {
        self.meta.as_ref().map(|m| &m.z[i])
    }

    /// `(raw score, alpha, beta)` for segments `i`, `j`; symmetric.
    pub fn pair(&self, model: &BackendModel, i: usize, j: usize) -> (f64, f64, f64) {
        let s = self.xt[i].dot(&self.u[j])
            + self.xt[j].dot(&self.u[i])
            + (self.q[i] + self.q[j])
            + model.sf.k;
        match (&self.meta, model.mode) {
            (Some(m), CalMode::MetaCal) => {
                let a = m.z[i].dot(&m.ua[j])
                    + m.z[j].dot(&m.ua[i])
                    + (m.qa[i] + m.qa[j])
                    + model.meta.k_a;
                let b = m.z[i].dot(&m.ub[j])
                    + m.z[j].dot(&m.ub[i])
                    + (m.qb[i] + m.qb[j])
                    + model.meta.k_b;
                (s, a, b)
            }
            _ => (s, model.meta.k_a, model.meta.k_b),
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub d_lda: usize,
    pub plda_iters: usize,
    pub use_gamma: bool,
    pub mode: CalMode,
    /// Speakers drawn for the trial list the initial global calibration is
    /// fitted on.
    pub calibration_speakers: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            d_lda: 20,
            plda_iters: 50,
            use_gamma: false,
            mode: CalMode::MetaCal,
            calibration_speakers: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_speakers_per_batch: usize,
    pub prior: f64,
    pub adam: AdamConfig,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub seed: u64,
    /// Learning rate of the score-path parameters.
    pub lr_stage1: f64,
    /// Learning rate of the calibration-head parameters.
    pub lr_stage2: f64,
    pub dev_eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_speakers_per_batch: 64,
            prior: 0.5,
            adam: AdamConfig::default(),
            stage1_steps: 2000,
            stage2_steps: 1000,
            seed: 0,
            lr_stage1: 1e-4,
            lr_stage2: 1e-3,
            dev_eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers_per_batch < 2 {
            return Err(Error::invalid("need at least two speakers per batch"));
        }
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(Error::invalid("prior must lie in (0, 1)"));
        }
        if self.dev_eval_every == 0 {
            return Err(Error::invalid("dev_eval_every must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Initialization

/// Trials used to fit the initial calibration: exhaustive among the
/// segments of up to `max_speakers` seeded-random speakers, minus
/// same-session targets and cross-domain impostors.
pub fn calibration_trials(dataset: &Dataset, max_speakers: usize, seed: u64) -> Result<Vec<Trial>> {
    let mut speakers: Vec<&str> = dataset.speakers().into_iter().collect();
    if speakers.len() > max_speakers {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        speakers.shuffle(&mut rng);
        speakers.truncate(max_speakers);
    }
    let keep: std::collections::HashSet<&str> = speakers.into_iter().collect();
    let subset = dataset.filter(|r| keep.contains(r.speaker_id.as_str()))?;
    let trials = build_trials(&subset, TrialPolicy::ExhaustiveExcludingSameSession);
    Ok(trials
        .into_iter()
        .filter(|t| {
            t.label == Some(TrialLabel::Target)
                || subset.get(&t.enroll_id).unwrap().domain
                    == subset.get(&t.test_id).unwrap().domain
        })
        .collect())
}

/// The generative pipeline: LDA, length normalization, two-covariance PLDA
/// by EM, and the pairwise score form, all fit on multi-session speakers.
pub fn train_generative(
    dataset: &Dataset,
    cfg: &BackendConfig,
) -> Result<(Projection<f64>, ScoreForm<f64>)> {
    let train = dataset.multi_session_subset()?;
    let proj = train_lda::<f64>(&train, cfg.d_lda)?;
    let xt = project_dataset(&proj, &train)?;
    let vectors: Vec<(DVector<f64>, &str)> = xt
        .into_iter()
        .zip(train.records())
        .map(|(v, r)| (v, r.speaker_id.as_str()))
        .collect();
    let plda = train_plda_em(&vectors, cfg.plda_iters)?;
    let sf = to_score_form(&plda)?;
    Ok((proj, sf))
}

/// Fits `(alpha, beta)` for a score-only model on `trials`.
pub fn fit_global_calibration(
    proj: &Projection<f64>,
    sf: &ScoreForm<f64>,
    dataset: &Dataset,
    trials: &[Trial],
    prior: f64,
) -> Result<GlobalCalibration<f64>> {
    let probe = BackendModel {
        proj: proj.clone(),
        sf: sf.clone(),
        meta: MetaCalibration::from_global(
            GlobalCalibration::identity(),
            DMatrix::zeros(crate::calibration::META_DIM, BOTTLENECK_DIM),
            false,
        ),
        cnet: None,
        mode: CalMode::GlobalCal,
        prior,
    };
    let scores = probe.score_trials(dataset, trials)?;
    train_global_calibration(&scores.labelled(false), prior)
}

/// Backend initialized from the generative recipe: calibration head zero
/// except `k_a`, `k_b` (the global calibration) and `W ~ N(0, 0.5^2)`.
pub fn initialize(
    dataset: &Dataset,
    cnet: Option<ConditionNet>,
    cfg: &BackendConfig,
    prior: f64,
    seed: u64,
) -> Result<BackendModel> {
    let (proj, sf) = train_generative(dataset, cfg)?;
    let trials = calibration_trials(dataset, cfg.calibration_speakers, seed)?;
    let global = fit_global_calibration(&proj, &sf, dataset, &trials, prior)?;
    log::info!(
        "initial calibration: alpha = {:.4}, beta = {:.4}",
        global.alpha,
        global.beta
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let meta = MetaCalibration::initialize(global, BOTTLENECK_DIM, cfg.use_gamma, &mut rng);
    if cfg.mode == CalMode::MetaCal && cnet.is_none() {
        return Err(Error::invalid("meta_cal mode needs a condition net"));
    }
    let model = BackendModel {
        proj,
        sf,
        meta,
        cnet,
        mode: cfg.mode,
        prior,
    };
    model.check_consistency()?;
    Ok(model)
}

/// The generative baseline: same LDA/PLDA, scalar calibration fitted on the
/// training trials, or only on `calibration_domain` when given.
pub fn train_baseline(
    dataset: &Dataset,
    cfg: &BackendConfig,
    prior: f64,
    seed: u64,
    calibration_domain: Option<&str>,
) -> Result<BackendModel> {
    let (proj, sf) = train_generative(dataset, cfg)?;
    let cal_data = match calibration_domain {
        Some(d) => {
            let sub = dataset.filter(|r| r.domain == d)?;
            if sub.is_empty() {
                return Err(Error::invalid(format!("no segments in domain `{d}`")));
            }
            sub
        }
        None => dataset.clone(),
    };
    let trials = calibration_trials(&cal_data, cfg.calibration_speakers, seed)?;
    let global = fit_global_calibration(&proj, &sf, &cal_data, &trials, prior)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Ok(BackendModel {
        proj,
        sf,
        meta: MetaCalibration::initialize(global, BOTTLENECK_DIM, false, &mut rng),
        cnet: None,
        mode: CalMode::GlobalCal,
        prior,
    })
}

// ---------------------------------------------------------------------------
// Mini-batches

/// Segments of a mini-batch (dataset record indices) and its labelled
/// in-batch trials as index pairs into `segments`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub segments: Vec<usize>,
    pub pairs: Vec<(usize, usize, TrialLabel)>,
}

impl MiniBatch {
    pub fn n_targets(&self) -> usize {
        self.pairs.iter().filter(|p| p.2.is_target()).count()
    }

    pub fn trials(&self, dataset: &Dataset) -> Vec<Trial> {
        let recs = dataset.records();
        self.pairs
            .iter()
            .map(|&(a, b, l)| Trial {
                enroll_id: recs[self.segments[a]].segment_id.clone(),
                test_id: recs[self.segments[b]].segment_id.clone(),
                label: Some(l),
            })
            .collect()
    }
}

/// All in-batch pairs of `segments`, minus same-session targets and
/// cross-domain impostors.
pub fn batch_pairs(dataset: &Dataset, segments: &[usize]) -> Vec<(usize, usize, TrialLabel)> {
    let recs = dataset.records();
    let mut pairs = Vec::new();
    for a in 0..segments.len() {
        for b in a + 1..segments.len() {
            let (x, y) = (&recs[segments[a]], &recs[segments[b]]);
            if x.speaker_id == y.speaker_id {
                if x.session_id != y.session_id {
                    pairs.push((a, b, TrialLabel::Target));
                }
            } else if x.domain == y.domain {
                pairs.push((a, b, TrialLabel::Impostor));
            }
        }
    }
    pairs
}

/// Speaker pools for batch sampling.
#[derive(Debug, Clone)]
pub struct SpeakerIndex {
    /// Record indices of each eligible speaker, speakers sorted.
    pub speakers: Vec<Vec<usize>>,
    /// Speaker positions grouped by domain, domains sorted.
    pub by_domain: Vec<Vec<usize>>,
}

impl SpeakerIndex {
    /// Speakers with at least two sessions.
    pub fn new(dataset: &Dataset) -> Self {
        let sessions = dataset.sessions_per_speaker();
        let mut speakers = Vec::new();
        let mut domains: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (spk, idx) in dataset.by_speaker() {
            if sessions[spk] >= 2 {
                domains
                    .entry(dataset.records()[idx[0]].domain.as_str())
                    .or_default()
                    .push(speakers.len());
                speakers.push(idx);
            }
        }
        Self {
            speakers,
            by_domain: domains.into_values().collect(),
        }
    }
}

/// `N` distinct speakers chosen uniformly, two random segments each.
pub fn sample_minibatch(
    dataset: &Dataset,
    index: &SpeakerIndex,
    n: usize,
    rng: &mut impl Rng,
) -> Result<MiniBatch> {
    if index.speakers.len() < n {
        return Err(Error::invalid(format!(
            "batch needs {n} speakers with two or more sessions, only {} available",
            index.speakers.len()
        )));
    }
    let chosen = rand::seq::index::sample(rng, index.speakers.len(), n);
    let mut segments = Vec::with_capacity(2 * n);
    for s in chosen.iter() {
        let two = rand::seq::index::sample(rng, index.speakers[s].len(), 2);
        segments.push(index.speakers[s][two.index(0)]);
        segments.push(index.speakers[s][two.index(1)]);
    }
    let pairs = batch_pairs(dataset, &segments);
    Ok(MiniBatch { segments, pairs })
}

/// Domain-balanced variant: speaker slots rotate over domains (starting at a
/// random domain) and each slot draws an unused speaker of its domain.
pub fn sample_balanced_minibatch(
    dataset: &Dataset,
    index: &SpeakerIndex,
    n: usize,
    rng: &mut impl Rng,
) -> Result<MiniBatch> {
    if index.speakers.len() < n {
        return Err(Error::invalid(format!(
            "batch needs {n} speakers with two or more sessions, only {} available",
            index.speakers.len()
        )));
    }
    let n_dom = index.by_domain.len();
    let mut pools: Vec<Vec<usize>> = index.by_domain.clone();
    for p in pools.iter_mut() {
        p.shuffle(rng);
    }
    let mut chosen = Vec::with_capacity(n);
    let mut d = rng.random_range(0..n_dom);
    while chosen.len() < n {
        // Skip exhausted domains; at least one pool is non-empty because
        // there are enough speakers overall.
        while pools[d].is_empty() {
            d = (d + 1) % n_dom;
        }
        chosen.push(pools[d].pop().unwrap());
        d = (d + 1) % n_dom;
    }
    let mut segments = Vec::with_capacity(2 * n);
    for &s in &chosen {
        let two = rand::seq::index::sample(rng, index.speakers[s].len(), 2);
        segments.push(index.speakers[s][two.index(0)]);
        segments.push(index.speakers[s][two.index(1)]);
    }
    let pairs = batch_pairs(dataset, &segments);
    Ok(MiniBatch { segments, pairs })
}

// ---------------------------------------------------------------------------
// Loss and gradients

/// Inputs of one batch: raw embeddings (`D x n`) and, for the metadata head,
/// condition bottleneck vectors (`10 x n`).
#[derive(Debug, Clone)]
pub struct BatchInputs {
    pub x: DMatrix<f64>,
    pub m: Option<DMatrix<f64>>,
    /// `(a, b, is_target)` indices into the columns.
    pub pairs: Vec<(usize, usize, bool)>,
}

impl BatchInputs {
    pub fn from_batch(
        batch: &MiniBatch,
        x_all: &DMatrix<f64>,
        m_all: Option<&DMatrix<f64>>,
    ) -> Self {
        Self {
            x: x_all.select_columns(&batch.segments),
            m: m_all.map(|m| m.select_columns(&batch.segments)),
            pairs: batch
                .pairs
                .iter()
                .map(|&(a, b, l)| (a, b, l.is_target()))
                .collect(),
        }
    }
}

/// Gradient of the batch loss for each trainable tensor, same layout as the
/// parameters. Symmetric-matrix gradients are symmetrized.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[&id]
    }
}

struct Forward {
    xt: DMatrix<f64>,
    norms: Vec<f64>,
    z: Option<DMatrix<f64>>,
    softmax: Option<DMatrix<f64>>,
    /// Per pair `(s, alpha, beta, llr)`.
    per_pair: Vec<(f64, f64, f64, f64)>,
}

fn forward(model: &BackendModel, inp: &BatchInputs) -> Result<Forward> {
    let n = inp.x.ncols();
    let mut v = &model.proj.matrix * &inp.x;
    for mut col in v.column_iter_mut() {
        col += &model.proj.offset;
    }
    let mut norms = Vec::with_capacity(n);
    for mut col in v.column_iter_mut() {
        let nrm = col.norm();
        if !(nrm > 0.0 && nrm.is_finite()) {
            return Err(Error::Numeric("zero-norm projected vector in batch".into()));
        }
        col /= nrm;
        norms.push(nrm);
    }
    let xt = v;
    let sf = &model.sf;
    let u = &sf.lambda * &xt;
    let gx = &sf.gamma * &xt;
    let q: Vec<f64> = (0..n)
        .map(|i| xt.column(i).dot(&gx.column(i)) + xt.column(i).dot(&sf.c))
        .collect();

    let meta_on = model.mode == CalMode::MetaCal;
    let (z, softmax, head) = if meta_on {
        let m = inp
            .m
            .as_ref()
            .ok_or_else(|| Error::invalid("meta_cal batch needs condition vectors"))?;
        let mut logits = &model.meta.w * m;
        let mut sm = logits.clone();
        for (mut col, mut smc) in logits.column_iter_mut().zip(sm.column_iter_mut()) {
            let max = col.max();
            let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            col.add_scalar_mut(-lse);
            smc.copy_from(&col.map(f64::exp));
        }
        let mc = &model.meta;
        let ua = &mc.lambda_a * &logits;
        let ub = &mc.lambda_b * &logits;
        let ga = &mc.gamma_a * &logits;
        let gb = &mc.gamma_b * &logits;
        let qa: Vec<f64> = (0..n)
            .map(|i| logits.column(i).dot(&ga.column(i)) + logits.column(i).dot(&mc.c_a))
            .collect();
        let qb: Vec<f64> = (0..n)
            .map(|i| logits.column(i).dot(&gb.column(i)) + logits.column(i).dot(&mc.c_b))
            .collect();
        (Some(logits), Some(sm), Some((ua, ub, qa, qb)))
    } else {
        (None, None, None)
    };

    let mut per_pair = Vec::with_capacity(inp.pairs.len());
    for &(i, j, _) in &inp.pairs {
        let s =
            xt.column(i).dot(&u.column(j)) + xt.column(j).dot(&u.column(i)) + (q[i] + q[j]) + sf.k;
        let (a, b) = match (&z, &head) {
            (Some(z), Some((ua, ub, qa, qb))) => (
                z.column(i).dot(&ua.column(j))
                    + z.column(j).dot(&ua.column(i))
                    + (qa[i] + qa[j])
                    + model.meta.k_a,
                z.column(i).dot(&ub.column(j))
                    + z.column(j).dot(&ub.column(i))
                    + (qb[i] + qb[j])
                    + model.meta.k_b,
            ),
            _ => (model.meta.k_a, model.meta.k_b),
        };
        per_pair.push((s, a, b, a * s + b));
    }
    Ok(Forward {
        xt,
        norms,
        z,
        softmax,
        per_pair,
    })
}

fn class_weights(pairs: &[(usize, usize, bool)], prior: f64) -> Option<(f64, f64)> {
    let n_tgt = pairs.iter().filter(|p| p.2).count();
    let n_imp = pairs.len() - n_tgt;
    if n_tgt == 0 || n_imp == 0 {
        return None;
    }
    Some((prior / n_tgt as f64, (1.0 - prior) / n_imp as f64))
}

/// Prior-weighted cross-entropy of the batch trials under the full
/// pipeline. `None` when a class is missing after exclusions.
pub fn batch_loss(model: &BackendModel, inp: &BatchInputs, prior: f64) -> Result<Option<f64>> {
    let Some((w_tgt, w_imp)) = class_weights(&inp.pairs, prior) else {
        return Ok(None);
    };
    let fw = forward(model, inp)?;
    let lp = logit(prior);
    let mut loss = 0.0;
    for (&(_, _, tgt), &(_, _, _, l)) in inp.pairs.iter().zip(&fw.per_pair) {
        loss += if tgt {
            w_tgt * softplus(-(l + lp))
        } else {
            w_imp * softplus(l + lp)
        };
    }
    Ok(Some(loss))
}

/// Accumulates `G (B x B)` pair weights into the gradients of a symmetric
/// quadratic form `2 a' L b + a' G a + b' G b + (a + b)' c + k` evaluated on
/// the columns of `v`. Returns `(dL, dG, dc, dk, dV)`.
fn quadratic_form_backward(
    v: &DMatrix<f64>,
    weights: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    c: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>, f64, DMatrix<f64>) {
    let n = v.ncols();
    let r = DVector::from_fn(n, |i, _| weights.row(i).sum());
    let mut d_lambda = v * weights * v.transpose();
    symmetrize(&mut d_lambda);
    let vr = DMatrix::from_fn(v.nrows(), n, |p, i| v[(p, i)] * r[i]);
    let mut d_gamma = &vr * v.transpose();
    symmetrize(&mut d_gamma);
    let d_c = v * &r;
    let d_k = r.sum() / 2.0;
    // d/dv_i = sum_j W_ij 2 L v_j + r_i (2 G v_i + c)
    let mut d_v = (lambda * v * weights) * 2.0;
    let gv = gamma * v * 2.0;
    for i in 0..n {
        let mut col = d_v.column_mut(i);
        col.axpy(r[i], &gv.column(i), 1.0);
        col.axpy(r[i], c, 1.0);
    }
    (d_lambda, d_gamma, d_c, d_k, d_v)
}

/// Loss and exact gradients for every trainable tensor. `None` (with a
/// warning) when the batch lacks a class after exclusions.
pub fn backward(
    model: &BackendModel,
    inp: &BatchInputs,
    prior: f64,
) -> Result<Option<(f64, Gradients)>> {
    let Some((w_tgt, w_imp)) = class_weights(&inp.pairs, prior) else {
        log::warn!("skipping batch without both trial classes");
        return Ok(None);
    };
    let fw = forward(model, inp)?;
    let n = inp.x.ncols();
    let lp = logit(prior);
    let mut loss = 0.0;
    let mut g_s = DMatrix::<f64>::zeros(n, n);
    let mut g_a = DMatrix::<f64>::zeros(n, n);
    let mut g_b = DMatrix::<f64>::zeros(n, n);
    let (mut sum_ga, mut sum_gb) = (0.0, 0.0);
    for (&(i, j, tgt), &(s, a, _, l)) in inp.pairs.iter().zip(&fw.per_pair) {
        let x = l + lp;
        let dl = if tgt {
            loss += w_tgt * softplus(-x);
            -w_tgt * sigmoid(-x)
        } else {
            loss += w_imp * softplus(x);
            w_imp * sigmoid(x)
        };
        let (ds, da, db) = (dl * a, dl * s, dl);
        g_s[(i, j)] += ds;
        g_s[(j, i)] += ds;
        g_a[(i, j)] += da;
        g_a[(j, i)] += da;
        g_b[(i, j)] += db;
        g_b[(j, i)] += db;
        sum_ga += da;
        sum_gb += db;
    }

    let mut grads = BTreeMap::new();
    let sf = &model.sf;
    let (d_lambda, d_gamma, d_c, d_k, d_xt) =
        quadratic_form_backward(&fw.xt, &g_s, &sf.lambda, &sf.gamma, &sf.c);

    // Through length normalization: (I - x x') / |v|.
    let mut d_v = DMatrix::zeros(fw.xt.nrows(), n);
    for i in 0..n {
        let x = fw.xt.column(i);
        let g = d_xt.column(i);
        let proj = g - x * x.dot(&g);
        d_v.column_mut(i).copy_from(&(proj / fw.norms[i]));
    }
    let d_p = &d_v * inp.x.transpose();
    let d_mu = DVector::from_fn(d_v.nrows(), |p, _| d_v.row(p).sum());
    grads.insert(ParamId::Projection, d_p.as_slice().to_vec());
    grads.insert(ParamId::Offset, d_mu.as_slice().to_vec());
    grads.insert(ParamId::Lambda, d_lambda.as_slice().to_vec());
    grads.insert(ParamId::Gamma, d_gamma.as_slice().to_vec());
    grads.insert(ParamId::C, d_c.as_slice().to_vec());
    grads.insert(ParamId::K, vec![d_k]);

    let mc = &model.meta;
    let r = mc.meta_dim();
    match (&fw.z, &fw.softmax, model.mode) {
        (Some(z), Some(sm), CalMode::MetaCal) => {
            let (dla, dga, dca, dka, dza) =
                quadratic_form_backward(z, &g_a, &mc.lambda_a, &mc.gamma_a, &mc.c_a);
            let (dlb, dgb, dcb, dkb, dzb) =
                quadratic_form_backward(z, &g_b, &mc.lambda_b, &mc.gamma_b, &mc.c_b);
            let d_z = dza + dzb;
            // Through log-softmax: du = dz - softmax * sum(dz).
            let mut d_u = d_z.clone();
            for i in 0..n {
                let total = d_z.column(i).sum();
                d_u.column_mut(i).axpy(-total, &sm.column(i), 1.0);
            }
            let m = inp.m.as_ref().unwrap();
            let d_w = &d_u * m.transpose();
            grads.insert(ParamId::MetaW, d_w.as_slice().to_vec());
            grads.insert(ParamId::LambdaA, dla.as_slice().to_vec());
            grads.insert(ParamId::CA, dca.as_slice().to_vec());
            grads.insert(ParamId::KA, vec![dka]);
            grads.insert(ParamId::LambdaB, dlb.as_slice().to_vec());
            grads.insert(ParamId::CB, dcb.as_slice().to_vec());
            grads.insert(ParamId::KB, vec![dkb]);
            if mc.use_gamma {
                grads.insert(ParamId::GammaA, dga.as_slice().to_vec());
                grads.insert(ParamId::GammaB, dgb.as_slice().to_vec());
            } else {
                grads.insert(ParamId::GammaA, vec![0.0; r * r]);
                grads.insert(ParamId::GammaB, vec![0.0; r * r]);
            }
        }
        _ => {
            grads.insert(ParamId::MetaW, vec![0.0; mc.w.len()]);
            for id in [
                ParamId::LambdaA,
                ParamId::GammaA,
                ParamId::LambdaB,
                ParamId::GammaB,
            ] {
                grads.insert(id, vec![0.0; r * r]);
            }
            grads.insert(ParamId::CA, vec![0.0; r]);
            grads.insert(ParamId::CB, vec![0.0; r]);
            grads.insert(ParamId::KA, vec![sum_ga]);
            grads.insert(ParamId::KB, vec![sum_gb]);
        }
    }
    Ok(Some((loss, Gradients { tensors: grads })))
}

// ---------------------------------------------------------------------------
// Evaluation on a development set

/// Trial-group key: the shared domain, or `cross` for cross-domain trials.
pub fn trial_groups(dataset: &Dataset, trials: &[Trial]) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (k, t) in trials.iter().enumerate() {
        let a = &dataset.get(&t.enroll_id)?.domain;
        let b = &dataset.get(&t.test_id)?.domain;
        let key = if a == b {
            a.clone()
        } else {
            "cross".to_owned()
        };
        groups.entry(key).or_default().push(k);
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevMetrics {
    /// Mean actual Cllr over trial groups with both classes.
    pub actual_cllr: f64,
    pub min_cllr: f64,
    pub per_group: BTreeMap<String, metrics::EvalReport>,
}

/// Per-group reports and their means.
pub fn evaluate_groups(
    scores: &ScoreSet,
    groups: &BTreeMap<String, Vec<usize>>,
) -> Result<DevMetrics> {
    let llr = scores
        .llr
        .as_ref()
        .ok_or_else(|| Error::invalid("scores are not calibrated"))?;
    let mut per_group = BTreeMap::new();
    for (key, idx) in groups {
        let labelled: Vec<(f64, bool)> = idx
            .iter()
            .filter_map(|&k| scores.trials[k].label.map(|l| (llr[k], l.is_target())))
            .collect();
        if labelled.iter().any(|p| p.1) && labelled.iter().any(|p| !p.1) {
            per_group.insert(key.clone(), metrics::evaluate(&labelled)?);
        }
    }
    if per_group.is_empty() {
        return Err(Error::invalid("no trial group has both classes"));
    }
    let n = per_group.len() as f64;
    Ok(DevMetrics {
        actual_cllr: per_group.values().map(|r| r.actual_cllr).sum::<f64>() / n,
        min_cllr: per_group.values().map(|r| r.min_cllr).sum::<f64>() / n,
        per_group,
    })
}

pub fn evaluate_model(
    model: &BackendModel,
    dataset: &Dataset,
    trials: &[Trial],
) -> Result<DevMetrics> {
    let scores = model.score_trials(dataset, trials)?;
    evaluate_groups(&scores, &trial_groups(dataset, trials)?)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub step: usize,
    pub stage: u8,
    pub loss: Option<f64>,
    pub dev_actual_cllr: Option<f64>,
    pub dev_min_cllr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub lines: Vec<ReportLine>,
    /// Dev metrics of the stage-1 model handed to stage 2.
    pub stage1_dev: Option<DevMetrics>,
    /// Best dev metrics among stage-2 checkpoints.
    pub stage2_best_dev: Option<DevMetrics>,
    pub best_dev: Option<DevMetrics>,
    pub best_step: usize,
    pub skipped_batches: usize,
    /// Range of `alpha` over dev trials for the returned model.
    pub dev_alpha_range: Option<(f64, f64)>,
}

impl TrainReport {
    /// Line-delimited JSON, one record per logged step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(&serde_json::to_string(l).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn losses(&self, stage: u8) -> Vec<f64> {
        self.lines
            .iter()
            .filter(|l| l.stage == stage)
            .filter_map(|l| l.loss)
            .collect()
    }
}

/// Development data for checkpoint selection.
pub struct DevSet<'a> {
    pub dataset: &'a Dataset,
    pub trials: &'a [Trial],
}

struct DevEval<'a> {
    dev: &'a DevSet<'a>,
    groups: BTreeMap<String, Vec<usize>>,
}

impl<'a> DevEval<'a> {
    fn new(dev: &'a DevSet<'a>) -> Result<Self> {
        Ok(Self {
            groups: trial_groups(dev.dataset, dev.trials)?,
            dev,
        })
    }

    fn eval(&self, model: &BackendModel) -> Result<DevMetrics> {
        let scores = model.score_trials(self.dev.dataset, self.dev.trials)?;
        evaluate_groups(&scores, &self.groups)
    }
}

fn alpha_range(model: &BackendModel, dev: &DevSet) -> Result<(f64, f64)> {
    let feats = model.prepare(dev.dataset)?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in dev.trials {
        let i = dev.dataset.position(&t.enroll_id).unwrap();
        let j = dev.dataset.position(&t.test_id).unwrap();
        let (_, a, _) = feats.pair(model, i, j);
        lo = lo.min(a);
        hi = hi.max(a);
    }
    Ok((lo, hi))
}

/// Two-stage training. Stage 1 updates every active parameter on batches
/// drawn from the whole dataset (score path at `lr_stage1`, calibration
/// head at `lr_stage2`); stage 2 starts from the stage-1 dev-best
/// checkpoint, freezes the projection and score form, and updates only the
/// calibration head on domain-balanced batches. Returns the dev-best
/// checkpoint of the whole run (the final model when no dev set is given).
pub fn train(
    model: &BackendModel,
    dataset: &Dataset,
    dev: Option<&DevSet>,
    cfg: &TrainConfig,
) -> Result<(BackendModel, TrainReport)> {
    cfg.validate()?;
    model.check_consistency()?;
    if let Some(dev) = dev {
        let train_spk = dataset.speakers();
        if let Some(s) = dev
            .dataset
            .speakers()
            .iter()
            .find(|s| train_spk.contains(*s))
        {
            return Err(Error::invalid(format!(
                "dev speaker `{s}` also appears in the training data"
            )));
        }
    }
    let index = SpeakerIndex::new(dataset);
    let x_all = embedding_matrix(dataset);
    let m_all = match (&model.mode, &model.cnet) {
        (CalMode::MetaCal, Some(c)) => Some(c.bottleneck_batch(&x_all)?),
        _ => None,
    };
    let dev_eval = dev.map(DevEval::new).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);

    let mut current = model.clone();
    let mut lines = Vec::new();
    let mut skipped = 0usize;
    let mut best: Option<(f64, usize, BackendModel, DevMetrics)> = None;

    let checkpoint = |step: usize,
                      stage: u8,
                      m: &BackendModel,
                      lines: &mut Vec<ReportLine>,
                      best: &mut Option<(f64, usize, BackendModel, DevMetrics)>|
     -> Result<Option<DevMetrics>> {
        let Some(ev) = &dev_eval else { return Ok(None) };
        let dm = ev.eval(m)?;
        lines.push(ReportLine {
            step,
            stage,
            loss: None,
            dev_actual_cllr: Some(dm.actual_cllr),
            dev_min_cllr: Some(dm.min_cllr),
        });
        log::info!(
            "step {step} (stage {stage}): dev actual Cllr {:.4}, min Cllr {:.4}",
            dm.actual_cllr,
            dm.min_cllr
        );
        if best.as_ref().is_none_or(|b| dm.actual_cllr < b.0) {
            *best = Some((dm.actual_cllr, step, m.clone(), dm.clone()));
        }
        Ok(Some(dm))
    };

    checkpoint(0, 0, &current, &mut lines, &mut best)?;

    // Stage 1
    let active = current.active_params();
    let score_ids: Vec<ParamId> = active
        .iter()
        .copied()
        .filter(|p| p.is_score_path())
        .collect();
    let head_ids: Vec<ParamId> = active
        .iter()
        .copied()
        .filter(|p| !p.is_score_path())
        .collect();
    let mut opt_score = Adam::new(cfg.adam, cfg.lr_stage1);
    let mut opt_head = Adam::new(cfg.adam, cfg.lr_stage2);
    let mut step = 0usize;
    for _ in 0..cfg.stage1_steps {
        step += 1;
        let batch = sample_minibatch(dataset, &index, cfg.n_speakers_per_batch, &mut rng)?;
        let inp = BatchInputs::from_batch(&batch, &x_all, m_all.as_ref());
        match backward(&current, &inp, cfg.prior)? {
            None => skipped += 1,
            Some((loss, grads)) => {
                apply(&mut current, &mut opt_score, &score_ids, &grads);
                apply(&mut current, &mut opt_head, &head_ids, &grads);
                lines.push(ReportLine {
                    step,
                    stage: 1,
                    loss: Some(loss),
                    dev_actual_cllr: None,
                    dev_min_cllr: None,
                });
            }
        }
        if step.is_multiple_of(cfg.dev_eval_every) && step != cfg.stage1_steps {
            checkpoint(step, 1, &current, &mut lines, &mut best)?;
        }
    }
    if cfg.stage1_steps > 0 {
        checkpoint(step, 1, &current, &mut lines, &mut best)?;
    }

    // Stage 2 continues from the best stage-1 checkpoint.
    let mut stage1_dev = None;
    if let Some((_, _, m, dm)) = &best {
        current = m.clone();
        stage1_dev = Some(dm.clone());
    }
    let mut stage2_best: Option<DevMetrics> = None;
    if cfg.stage2_steps > 0 && !head_ids.is_empty() {
        let mut opt = Adam::new(cfg.adam, cfg.lr_stage2);
        for k in 0..cfg.stage2_steps {
            step += 1;
            let batch =
                sample_balanced_minibatch(dataset, &index, cfg.n_speakers_per_batch, &mut rng)?;
            let inp = BatchInputs::from_batch(&batch, &x_all, m_all.as_ref());
            match backward(&current, &inp, cfg.prior)? {
                None => skipped += 1,
                Some((loss, grads)) => {
                    apply(&mut current, &mut opt, &head_ids, &grads);
                    lines.push(ReportLine {
                        step,
                        stage: 2,
                        loss: Some(loss),
                        dev_actual_cllr: None,
                        dev_min_cllr: None,
                    });
                }
            }
            if (k + 1) % cfg.dev_eval_every == 0 || k + 1 == cfg.stage2_steps {
                if let Some(dm) = checkpoint(step, 2, &current, &mut lines, &mut best)? {
                    if stage2_best
                        .as_ref()
                        .is_none_or(|b| dm.actual_cllr < b.actual_cllr)
                    {
                        stage2_best = Some(dm);
                    }
                }
            }
        }
    }

    let (result, best_dev, best_step) = match best {
        Some((_, s, m, dm)) => (m, Some(dm), s),
        None => (current, None, step),
    };
    let dev_alpha_range = dev.map(|d| alpha_range(&result, d)).transpose()?;
    Ok((
        result,
        TrainReport {
            lines,
            stage1_dev,
            stage2_best_dev: stage2_best,
            best_dev,
            best_step,
            skipped_batches: skipped,
            dev_alpha_range,
        },
    ))
}

fn apply(model: &mut BackendModel, opt: &mut Adam, ids: &[ParamId], grads: &Gradients) {
    if ids.is_empty() {
        return;
    }
    let g: Vec<&[f64]> = ids.iter().map(|&id| grads.get(id)).collect();
    let mut p = model.tensors_mut(ids);
    opt.step(&mut p, &g);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub seeds: Vec<u64>,
    pub dev_actual_cllr: Vec<f64>,
    pub selected: usize,
    pub spread: f64,
}

/// Trains with seeds `cfg.seed .. cfg.seed + k` (each seed also drawing its
/// own metadata-projection initialization) and keeps the run with the
/// lowest dev actual Cllr.
pub fn multiseed_train(
    k: usize,
    dataset: &Dataset,
    cnet: Option<&ConditionNet>,
    backend: &BackendConfig,
    dev: &DevSet,
    cfg: &TrainConfig,
) -> Result<(BackendModel, TrainReport, MultiSeedReport)> {
    if k == 0 {
        return Err(Error::invalid("need at least one seed"));
    }
    let mut runs = Vec::with_capacity(k);
    for i in 0..k as u64 {
        let seed = cfg.seed + i;
        let init = initialize(dataset, cnet.cloned(), backend, cfg.prior, seed)?;
        let run_cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        let (model, report) = train(&init, dataset, Some(dev), &run_cfg)?;
        let cllr = report
            .best_dev
            .as_ref()
            .map(|d| d.actual_cllr)
            .unwrap_or(f64::INFINITY);
        log::info!("seed {seed}: dev actual Cllr {cllr:.4}");
        runs.push((seed, cllr, model, report));
    }
    let selected = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(i, _)| i)
        .unwrap();
    let costs: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let spread = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let summary = MultiSeedReport {
        seeds: runs.iter().map(|r| r.0).collect(),
        dev_actual_cllr: costs,
        selected,
        spread,
    };
    let (_, _, model, report) = runs.swap_remove(selected);
    Ok((model, report, summary))
}
