//! Seeded synthetic corpora with PLDA-distributed speakers spread over
//! domains that differ in mean shift, scale and condition-label granularity.
//!
//! Every domain draws from its own ChaCha stream (`set_stream(domain index)`)
//! so adding or resizing a later domain never perturbs earlier ones.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SegmentRecord};
use crate::error::{Error, Result};

/// Diagonal covariance eigenspectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spectrum {
    Constant(f64),
    /// Geometric decay from `first` to `last` over the dimensions.
    Geometric {
        first: f64,
        last: f64,
    },
    Values(Vec<f64>),
}

impl Spectrum {
    pub fn values(&self, dim: usize) -> Result<Vec<f64>> {
        let v = match self {
            Spectrum::Constant(c) => vec![*c; dim],
            Spectrum::Geometric { first, last } => {
                if dim == 1 {
                    vec![*first]
                } else {
                    let ratio = (last / first).powf(1.0 / (dim - 1) as f64);
                    (0..dim).map(|i| first * ratio.powi(i as i32)).collect()
                }
            }
            Spectrum::Values(v) => {
                if v.len() != dim {
                    return Err(Error::invalid(format!(
                        "spectrum has {} values, dimension is {dim}",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::invalid(
                "spectrum values must be finite and non-negative",
            ));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub n_speakers: usize,
    /// Explicit shift vector; takes precedence over `shift_norm`.
    #[serde(default)]
    pub mean_shift: Option<Vec<f64>>,
    /// Length of a shift along a random direction drawn from the domain's
    /// stream.
    #[serde(default)]
    pub shift_norm: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default = "one_usize")]
    pub n_condition_labels: usize,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub dim: usize,
    pub sessions_per_speaker: usize,
    pub segments_per_session: usize,
    pub between: Spectrum,
    pub within: Spectrum,
    pub domains: Vec<DomainSpec>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::mismatch5(2000, 0)
    }
}

/// Share of speakers per domain in the imbalanced five-domain benchmark.
pub const MISMATCH5_SHARES: [f64; 5] = [0.53, 0.25, 0.11, 0.06, 0.04];

impl SynthSpec {
    /// One unshifted domain.
    pub fn single_domain(dim: usize, n_speakers: usize, seed: u64) -> Self {
        Self {
            dim,
            sessions_per_speaker: 2,
            segments_per_session: 2,
            between: Spectrum::Geometric {
                first: 1.0,
                last: 0.05,
            },
            within: Spectrum::Constant(0.3),
            domains: vec![DomainSpec {
                name: "dom1".into(),
                n_speakers,
                mean_shift: None,
                shift_norm: 0.0,
                scale: 1.0,
                n_condition_labels: 2,
            }],
            seed,
        }
    }

    /// The imbalanced five-domain "mismatch-5" benchmark: `D = 50`, domain
    /// shares 53/25/11/6/4 % of `total_speakers`, distinct shifts and
    /// scales, and 1 to 8 condition labels per domain.
    pub fn mismatch5(total_speakers: usize, seed: u64) -> Self {
        let shifts = [0.0, 2.0, 3.0, 2.5, 4.0];
        let scales = [1.0, 0.8, 1.3, 0.7, 1.6];
        let labels = [1, 8, 4, 2, 3];
        let domains = (0..5)
            .map(|i| DomainSpec {
                name: format!("dom{}", i + 1),
                n_speakers: ((total_speakers as f64 * MISMATCH5_SHARES[i]).round() as usize).max(4),
                mean_shift: None,
                shift_norm: shifts[i],
                scale: scales[i],
                n_condition_labels: labels[i],
            })
            .collect();
        Self {
            dim: 50,
            sessions_per_speaker: 2,
            segments_per_session: 2,
            between: Spectrum::Geometric {
                first: 1.0,
                last: 0.02,
            },
            within: Spectrum::Constant(0.25),
            domains,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.sessions_per_speaker == 0 || self.segments_per_session == 0 {
            return Err(Error::invalid(
                "dimension, sessions and segments per session must be positive",
            ));
        }
        if self.domains.is_empty() {
            return Err(Error::invalid("at least one domain is required"));
        }
        for d in &self.domains {
            if !(d.scale > 0.0 && d.scale.is_finite()) {
                return Err(Error::invalid(format!(
                    "domain `{}`: scale must be > 0",
                    d.name
                )));
            }
            if d.n_condition_labels == 0 {
                return Err(Error::invalid(format!(
                    "domain `{}`: needs at least one condition label",
                    d.name
                )));
            }
            if let Some(s) = &d.mean_shift {
                if s.len() != self.dim {
                    return Err(Error::invalid(format!(
                        "domain `{}`: shift has {} components, dimension is {}",
                        d.name,
                        s.len(),
                        self.dim
                    )));
                }
            }
        }
        self.between.values(self.dim)?;
        self.within.values(self.dim)?;
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng, std: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        std.len(),
        std.iter().map(|s| {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        }),
    )
}

/// Draws the corpus: per speaker `y ~ N(0, B)`, per segment
/// `x = scale * (y + e) + shift` with `e ~ N(0, W)`. Condition labels cycle
/// over the domain's sessions in `n_condition_labels` buckets.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let b_std: Vec<f64> = spec
        .between
        .values(spec.dim)?
        .iter()
        .map(|v| v.sqrt())
        .collect();
    let w_std: Vec<f64> = spec
        .within
        .values(spec.dim)?
        .iter()
        .map(|v| v.sqrt())
        .collect();
    let mut records = Vec::new();
    for (di, dom) in spec.domains.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(di as u64);
        // The direction is always drawn so that stream positions do not
        // depend on whether the shift is explicit.
        let dir = gaussian(&mut rng, &vec![1.0; spec.dim]);
        let shift = match &dom.mean_shift {
            Some(s) => DVector::from_column_slice(s),
            None if dom.shift_norm == 0.0 => DVector::zeros(spec.dim),
            None => dir.normalize() * dom.shift_norm,
        };
        let mut session_counter = 0usize;
        for s in 0..dom.n_speakers {
            let speaker_id = format!("{}-spk{:05}", dom.name, s);
            let y = gaussian(&mut rng, &b_std);
            for j in 0..spec.sessions_per_speaker {
                let session_id = format!("{speaker_id}-ses{j}");
                let label = format!("{}:c{}", dom.name, session_counter % dom.n_condition_labels);
                session_counter += 1;
                for k in 0..spec.segments_per_session {
                    let e = gaussian(&mut rng, &w_std);
                    let x = (&y + e) * dom.scale + &shift;
                    records.push(SegmentRecord {
                        segment_id: format!("{session_id}-seg{k}"),
                        speaker_id: speaker_id.clone(),
                        session_id: session_id.clone(),
                        domain: dom.name.clone(),
                        condition_label: Some(label.clone()),
                        embedding: x.as_slice().to_vec(),
                    });
                }
            }
        }
    }
    Dataset::new(records)
}

/// Splits every domain's speakers, in their sorted order, into consecutive
/// parts with the given relative sizes.
pub fn split_by_speaker(dataset: &Dataset, fractions: &[f64]) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !f.is_finite() || *f <= 0.0) {
        return Err(Error::invalid("split fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    let mut part_of = std::collections::HashMap::new();
    for dom in dataset.domains() {
        let speakers: Vec<&str> = dataset
            .records()
            .iter()
            .filter(|r| r.domain == dom)
            .map(|r| r.speaker_id.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let n = speakers.len() as f64;
        let mut cum = 0.0;
        let mut bounds = Vec::new();
        for f in fractions {
            cum += f / total;
            bounds.push((cum * n).round() as usize);
        }
        for (i, spk) in speakers.iter().enumerate() {
            let part = bounds
                .iter()
                .position(|&b| i < b)
                .unwrap_or(fractions.len() - 1);
            part_of.insert(spk.to_string(), part);
        }
    }
    (0..fractions.len())
        .map(|p| dataset.filter(|r| part_of[&r.speaker_id] == p))
        .collect()
}
