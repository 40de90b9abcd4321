//! Run configuration: one TOML document with a section per module, plus
//! `--set section.key=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dplda_core::condition_net::CnetConfig;
use dplda_core::data::TrialPolicy;
use dplda_core::synth::SynthSpec;
use dplda_core::trainer::{BackendConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Train/dev/test speaker fractions used by `synth`.
    pub split: [f64; 3],
    pub trial_policy: TrialPolicy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split: [0.6, 0.2, 0.2],
            trial_policy: TrialPolicy::ExhaustiveExcludingSameSession,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Training runs per `train` call; the dev-best one is kept.
    pub n_seeds: usize,
    /// Domain whose trials calibrate the baseline; all training data when
    /// unset.
    pub baseline_domain: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_seeds: 1,
            baseline_domain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub experiment: ExperimentConfig,
    pub synth: SynthSpec,
    pub cnet: CnetConfig,
    pub backend: BackendConfig,
    pub train: TrainConfig,
}

/// Marks errors in the configuration itself so they map to the validation
/// exit status.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl RunConfig {
    /// Reads `path` (defaults when absent), applies `overrides`, then sets
    /// every seed to `seed` when given.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o).map_err(|e| ConfigError(e.to_string()))?;
        }
        let mut cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| ConfigError(format!("config: {e}")))?;
        if let Some(s) = seed {
            cfg.synth.seed = s;
            cfg.cnet.seed = s;
            cfg.train.seed = s;
        }
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.experiment.n_seeds == 0 {
            bail!("experiment.n_seeds must be at least 1");
        }
        if self.data.split.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            bail!("data.split fractions must be positive");
        }
        if !(self.backend.d_lda > 0 && self.backend.plda_iters > 0) {
            bail!("backend.d_lda and backend.plda_iters must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// `a.b.c=value`: the value is parsed as a TOML literal, falling back to a
/// bare string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not key=value"))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_owned()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` is malformed");
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .with_context(|| format!("override `{key}`: `{p}` is not a section"))?;
    }
    table.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "train.stage1_steps=7".into(),
                "backend.mode=global_cal".into(),
            ],
            Some(4),
        )
        .unwrap();
        assert_eq!(cfg.train.stage1_steps, 7);
        assert_eq!(cfg.backend.mode, dplda_core::CalMode::GlobalCal);
        assert_eq!((cfg.synth.seed, cfg.train.seed, cfg.cnet.seed), (4, 4, 4));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::resolve(None, &["train.stage_one=3".into()], None).unwrap_err();
        assert!(e.downcast_ref::<ConfigError>().is_some());
        assert!(e.to_string().contains("stage_one"), "{e}");
    }
}
