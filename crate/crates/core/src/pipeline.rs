//! Score files, per-domain evaluation, and the end-to-end experiments run
//! by the CLI and the acceptance suite.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::condition_net::{train_condition_net, CnetConfig, ConditionNet};
use crate::data::{Dataset, ScoreSet, Trial, TrialLabel};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::synth::{generate, split_by_speaker, SynthSpec};
use crate::trainer::{
    initialize, train, train_baseline, BackendConfig, BackendModel, CalMode, DevSet,
    MultiSeedReport, TrainConfig, TrainReport,
};

pub const SCORE_HEADER: &str = "enroll_id\ttest_id\traw_score\tllr\tlabel";

/// Tab-separated score file: `enroll_id test_id raw_score llr label`, with
/// `-` for a missing llr or label.
pub fn format_scores(scores: &ScoreSet) -> String {
    let mut out = String::from(SCORE_HEADER);
    out.push('\n');
    for (k, t) in scores.trials.iter().enumerate() {
        let llr = scores
            .llr
            .as_ref()
            .map_or_else(|| "-".to_owned(), |l| l[k].to_string());
        let label = t.label.map_or("-", |l| l.as_str());
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            t.enroll_id, t.test_id, scores.raw_score[k], llr, label
        )
        .unwrap();
    }
    out
}

pub fn write_scores(path: &Path, scores: &ScoreSet) -> Result<()> {
    fs::write(path, format_scores(scores)).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_owned(),
        line,
        msg,
    };
    let mut trials = Vec::new();
    let mut raw = Vec::new();
    let mut llrs = Vec::new();
    let mut all_llr = true;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || (i == 0 && line.starts_with("enroll_id")) {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if !(4..=5).contains(&f.len()) {
            return Err(parse_err(
                line_no,
                format!("expected 4 or 5 fields, found {}", f.len()),
            ));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| parse_err(line_no, format!("bad {what} `{s}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("non-finite {what}")));
            }
            Ok(v)
        };
        raw.push(num(f[2], "raw score")?);
        if f[3] == "-" {
            all_llr = false;
            llrs.push(0.0);
        } else {
            llrs.push(num(f[3], "llr")?);
        }
        let label = match f.get(4).copied() {
            None | Some("-") => None,
            Some(s) => Some(
                TrialLabel::parse(s)
                    .ok_or_else(|| parse_err(line_no, format!("bad label `{s}`")))?,
            ),
        };
        trials.push(Trial {
            enroll_id: f[0].to_owned(),
            test_id: f[1].to_owned(),
            label,
        });
    }
    Ok(ScoreSet {
        trials,
        raw_score: raw,
        llr: all_llr.then_some(llrs),
    })
}

/// Report on the calibrated scores (raw scores when no llr column exists).
pub fn evaluate_scores(scores: &ScoreSet) -> Result<EvalReport> {
    let labelled = scores.labelled(scores.llr.is_some());
    if labelled.is_empty() {
        return Err(Error::invalid("score set carries no labels"));
    }
    evaluate(&labelled)
}

/// Same-domain trials excluding same-session pairs, grouped per domain.
pub fn within_domain_trials(dataset: &Dataset) -> BTreeMap<String, Vec<Trial>> {
    let recs = dataset.records();
    let mut by_domain: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in recs.iter().enumerate() {
        by_domain.entry(r.domain.as_str()).or_default().push(i);
    }
    by_domain
        .into_iter()
        .map(|(d, idx)| {
            let mut trials = Vec::new();
            for (a, &i) in idx.iter().enumerate() {
                for &j in &idx[a + 1..] {
                    let (x, y) = (&recs[i], &recs[j]);
                    if x.session_id == y.session_id {
                        continue;
                    }
                    let label = if x.speaker_id == y.speaker_id {
                        TrialLabel::Target
                    } else {
                        TrialLabel::Impostor
                    };
                    trials.push(Trial {
                        enroll_id: x.segment_id.clone(),
                        test_id: y.segment_id.clone(),
                        label: Some(label),
                    });
                }
            }
            (d.to_owned(), trials)
        })
        .collect()
}

/// Per-domain reports of `model` on pre-built trial groups.
pub fn domain_reports(
    model: &BackendModel,
    dataset: &Dataset,
    trials: &BTreeMap<String, Vec<Trial>>,
) -> Result<BTreeMap<String, EvalReport>> {
    trials
        .iter()
        .map(|(d, t)| {
            let scores = model.score_trials(dataset, t)?;
            Ok((d.clone(), evaluate_scores(&scores)?))
        })
        .collect()
}

/// Sum over domains of `actual - min` Cllr.
pub fn summed_gap(reports: &BTreeMap<String, EvalReport>) -> f64 {
    reports.values().map(|r| r.calibration_gap()).sum()
}

pub fn summed_actual(reports: &BTreeMap<String, EvalReport>) -> f64 {
    reports.values().map(|r| r.actual_cllr).sum()
}

/// Train/dev/test partition by speaker within every domain.
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

pub fn split_three(dataset: &Dataset, fractions: [f64; 3]) -> Result<Splits> {
    let mut parts = split_by_speaker(dataset, &fractions)?.into_iter();
    Ok(Splits {
        train: parts.next().unwrap(),
        dev: parts.next().unwrap(),
        test: parts.next().unwrap(),
    })
}

/// Settings of the mismatch-5 comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Mismatch5Config {
    pub corpus: SynthSpec,
    pub split: [f64; 3],
    /// Domain the baseline calibration is fitted on.
    pub baseline_domain: String,
    pub backend: BackendConfig,
    pub train: TrainConfig,
    pub cnet: CnetConfig,
    pub n_seeds: usize,
}

impl Default for Mismatch5Config {
    fn default() -> Self {
        Self {
            corpus: SynthSpec::mismatch5(2000, 2024),
            split: [0.6, 0.2, 0.2],
            baseline_domain: "dom1".into(),
            backend: BackendConfig::default(),
            train: TrainConfig::default(),
            cnet: CnetConfig::default(),
            n_seeds: 5,
        }
    }
}

/// Per-domain test reports of one trained system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub name: String,
    pub seed: Option<u64>,
    pub test: BTreeMap<String, EvalReport>,
    pub summed_gap: f64,
    pub summed_actual: f64,
}

impl SystemResult {
    fn new(name: &str, seed: Option<u64>, test: BTreeMap<String, EvalReport>) -> Self {
        Self {
            name: name.to_owned(),
            seed,
            summed_gap: summed_gap(&test),
            summed_actual: summed_actual(&test),
            test,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mismatch5Result {
    pub baseline: SystemResult,
    /// Global-calibration DPLDA, one entry per seed.
    pub global: Vec<SystemResult>,
    /// Metadata-conditioned DPLDA, one entry per seed.
    pub meta: Vec<SystemResult>,
    /// Meta-cal system picked by dev actual Cllr over the seeds.
    pub meta_selected: SystemResult,
    pub global_selected: SystemResult,
    pub meta_multiseed: MultiSeedReport,
    pub global_multiseed: MultiSeedReport,
    pub cnet_train_accuracy: f64,
}

/// Everything the mismatch-5 comparison needs, built once.
pub struct Mismatch5Data {
    pub splits: Splits,
    pub dev_trials: Vec<Trial>,
    pub test_trials: BTreeMap<String, Vec<Trial>>,
    pub cnet: ConditionNet,
    pub cnet_train_accuracy: f64,
}

impl Mismatch5Data {
    pub fn build(cfg: &Mismatch5Config) -> Result<Self> {
        let corpus = generate(&cfg.corpus)?;
        let splits = split_three(&corpus, cfg.split)?;
        let dev_trials = crate::data::build_trials(
            &splits.dev,
            crate::data::TrialPolicy::ExhaustiveExcludingSameSession,
        );
        let test_trials = within_domain_trials(&splits.test);
        let (cnet, report) = train_condition_net(&splits.train, &cfg.cnet)?;
        Ok(Self {
            splits,
            dev_trials,
            test_trials,
            cnet,
            cnet_train_accuracy: report.train_accuracy,
        })
    }

    pub fn dev(&self) -> DevSet<'_> {
        DevSet {
            dataset: &self.splits.dev,
            trials: &self.dev_trials,
        }
    }

    pub fn test_reports(&self, model: &BackendModel) -> Result<BTreeMap<String, EvalReport>> {
        domain_reports(model, &self.splits.test, &self.test_trials)
    }
}

/// A trained model with its training report.
pub type SeedRun = (BackendModel, TrainReport);

/// One DPLDA run per seed in `mode`, plus the dev-selected model.
pub fn train_seeds(
    data: &Mismatch5Data,
    cfg: &Mismatch5Config,
    mode: CalMode,
) -> Result<(Vec<SeedRun>, usize, MultiSeedReport)> {
    let backend = BackendConfig {
        mode,
        ..cfg.backend.clone()
    };
    let cnet = (mode == CalMode::MetaCal).then_some(&data.cnet);
    let dev = data.dev();
    let mut runs = Vec::new();
    for i in 0..cfg.n_seeds as u64 {
        let tc = TrainConfig {
            seed: cfg.train.seed + i,
            ..cfg.train.clone()
        };
        let init = initialize(
            &data.splits.train,
            cnet.cloned(),
            &backend,
            tc.prior,
            tc.seed,
        )?;
        let (model, report) = train(&init, &data.splits.train, Some(&dev), &tc)?;
        log::info!(
            "{} seed {}: dev actual Cllr {:.4}",
            mode.as_str(),
            tc.seed,
            report.best_dev.as_ref().map_or(f64::NAN, |d| d.actual_cllr)
        );
        runs.push((model, report));
    }
    let costs: Vec<f64> = runs
        .iter()
        .map(|(_, r)| r.best_dev.as_ref().map_or(f64::INFINITY, |d| d.actual_cllr))
        .collect();
    let selected = (0..costs.len())
        .min_by(|&a, &b| costs[a].total_cmp(&costs[b]))
        .ok_or_else(|| Error::invalid("need at least one seed"))?;
    let spread = costs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let summary = MultiSeedReport {
        seeds: (0..cfg.n_seeds as u64)
            .map(|i| cfg.train.seed + i)
            .collect(),
        dev_actual_cllr: costs,
        selected,
        spread,
    };
    Ok((runs, selected, summary))
}

pub fn run_mismatch5(cfg: &Mismatch5Config) -> Result<Mismatch5Result> {
    let data = Mismatch5Data::build(cfg)?;
    let baseline = train_baseline(
        &data.splits.train,
        &cfg.backend,
        cfg.train.prior,
        cfg.train.seed,
        Some(&cfg.baseline_domain),
    )?;
    let baseline = SystemResult::new("baseline", None, data.test_reports(&baseline)?);

    let mut results = Vec::new();
    for mode in [CalMode::GlobalCal, CalMode::MetaCal] {
        let (runs, selected, summary) = train_seeds(&data, cfg, mode)?;
        let per_seed = runs
            .iter()
            .zip(&summary.seeds)
            .map(|((m, _), &s)| {
                Ok(SystemResult::new(
                    mode.as_str(),
                    Some(s),
                    data.test_reports(m)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let chosen = per_seed[selected].clone();
        results.push((per_seed, chosen, summary));
    }
    let (meta, meta_selected, meta_multiseed) = results.pop().unwrap();
    let (global, global_selected, global_multiseed) = results.pop().unwrap();
    Ok(Mismatch5Result {
        baseline,
        global,
        meta,
        meta_selected,
        global_selected,
        meta_multiseed,
        global_multiseed,
        cnet_train_accuracy: data.cnet_train_accuracy,
    })
}
