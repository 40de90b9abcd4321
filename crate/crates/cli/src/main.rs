//! `dplda`: synthetic corpora, condition nets, backend training, scoring and
//! evaluation from the command line.
//!
//! Exit status: 0 on success, 2 for invalid input or configuration, 3 for
//! runtime and numerical failures.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{ConfigError, RunConfig};
use dplda_core::condition_net::train_condition_net;
use dplda_core::data::{
    build_trials, load_dataset, read_trials, save_dataset, write_trials, Dataset,
};
use dplda_core::pipeline::{evaluate_scores, read_scores, split_three, write_scores};
use dplda_core::store::{load_cnet, load_model, save_cnet, save_model, BundleInfo};
use dplda_core::synth::generate;
use dplda_core::trainer::{initialize, multiseed_train, train, train_baseline, CalMode, DevSet};

#[derive(Parser)]
#[command(
    name = "dplda",
    version,
    about = "Discriminative PLDA backend with metadata-conditioned calibration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for corpus generation, condition net and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out_dir: PathBuf,
    /// Override a config value, e.g. `--set train.stage1_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DataPaths {
    /// Embedding archive (binary or text).
    #[arg(long)]
    emb: PathBuf,
    /// Metadata table.
    #[arg(long)]
    meta: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its train/dev/test splits.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the condition classifier whose bottleneck feeds the metadata head.
    TrainCnet {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataPaths,
    },
    /// Initialize from the generative backend and train discriminatively.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataPaths,
        /// Condition-net bundle; trained on the spot when meta_cal needs one.
        #[arg(long)]
        cnet: Option<PathBuf>,
        #[arg(long, requires = "dev_meta")]
        dev_emb: Option<PathBuf>,
        #[arg(long, requires = "dev_emb")]
        dev_meta: Option<PathBuf>,
        /// Dev trial list; built from the dev set when omitted.
        #[arg(long, requires = "dev_emb")]
        dev_trials: Option<PathBuf>,
    },
    /// LDA, PLDA and a global calibration, without discriminative training.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataPaths,
    },
    /// Score a trial list with a model bundle.
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataPaths,
        #[arg(long)]
        model: PathBuf,
        /// Trial list; every pair under the configured policy when omitted.
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// Cllr, min Cllr and EER of a labelled score file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<dplda_core::Error>() {
            return if core.is_validation() { 2 } else { 3 };
        }
    }
    3
}

/// Resolves the configuration and echoes it into the output directory.
fn prepare(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides, common.seed)?;
    fs::create_dir_all(&common.out_dir)
        .with_context(|| format!("creating {}", common.out_dir.display()))?;
    write(&common.out_dir.join("effective_config.toml"), cfg.to_toml())?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// `SOURCE_DATE_EPOCH` when set, so that bundles can be reproduced byte for
/// byte; the current time otherwise.
fn timestamp() -> Result<String> {
    let secs = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => v
            .trim()
            .parse::<i64>()
            .map_err(|_| ConfigError(format!("SOURCE_DATE_EPOCH `{v}` is not an integer")))?,
        Err(_) => chrono::Utc::now().timestamp(),
    };
    let t = chrono::DateTime::from_timestamp(secs, 0)
        .ok_or_else(|| ConfigError(format!("SOURCE_DATE_EPOCH {secs} out of range")))?;
    Ok(t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
}

fn bundle_info(cfg: &RunConfig) -> Result<BundleInfo> {
    Ok(BundleInfo {
        created: timestamp()?,
        config: cfg.to_json(),
    })
}

fn load(data: &DataPaths) -> Result<Dataset> {
    Ok(load_dataset(&data.emb, &data.meta)?)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { common } => cmd_synth(&common),
        Command::TrainCnet { common, data } => cmd_train_cnet(&common, &data),
        Command::Train {
            common,
            data,
            cnet,
            dev_emb,
            dev_meta,
            dev_trials,
        } => {
            let dev = match (dev_emb, dev_meta) {
                (Some(e), Some(m)) => Some((e, m, dev_trials)),
                _ => None,
            };
            cmd_train(&common, &data, cnet.as_deref(), dev)
        }
        Command::Baseline { common, data } => cmd_baseline(&common, &data),
        Command::Score {
            common,
            data,
            model,
            trials,
        } => cmd_score(&common, &data, &model, trials.as_deref()),
        Command::Eval { common, scores } => cmd_eval(&common, &scores),
    }
}

fn cmd_synth(common: &Common) -> Result<()> {
    let cfg = prepare(common)?;
    let corpus = generate(&cfg.synth)?;
    let out = &common.out_dir;
    save_dataset(&corpus, &out.join("all.emb"), &out.join("all.tsv"))?;
    let splits = split_three(&corpus, cfg.data.split)?;
    for (name, ds) in [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("test", &splits.test),
    ] {
        save_dataset(
            ds,
            &out.join(format!("{name}.emb")),
            &out.join(format!("{name}.tsv")),
        )?;
        if name != "train" {
            let trials = build_trials(ds, cfg.data.trial_policy);
            write_trials(&out.join(format!("{name}_trials.tsv")), &trials)?;
        }
    }
    log::info!(
        "wrote {} segments ({} train, {} dev, {} test) to {}",
        corpus.len(),
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train_cnet(common: &Common, data: &DataPaths) -> Result<()> {
    let cfg = prepare(common)?;
    let train_set = load(data)?;
    let (net, report) = train_condition_net(&train_set, &cfg.cnet)?;
    save_cnet(
        &net,
        &bundle_info(&cfg)?,
        &common.out_dir.join("cnet.bundle"),
    )?;
    let summary = json!({
        "classes": net.class_names,
        "train_accuracy": report.train_accuracy,
        "majority_rate": report.majority_rate,
        "epoch_loss": report.epoch_loss,
    });
    write(
        &common.out_dir.join("cnet_report.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

fn cmd_train(
    common: &Common,
    data: &DataPaths,
    cnet_path: Option<&Path>,
    dev: Option<(PathBuf, PathBuf, Option<PathBuf>)>,
) -> Result<()> {
    let cfg = prepare(common)?;
    let train_set = load(data)?;
    let cnet = match (cfg.backend.mode, cnet_path) {
        (_, Some(p)) => Some(load_cnet(p)?.0),
        (CalMode::MetaCal, None) => {
            log::info!("no condition net given; training one on the training set");
            let (net, _) = train_condition_net(&train_set, &cfg.cnet)?;
            save_cnet(
                &net,
                &bundle_info(&cfg)?,
                &common.out_dir.join("cnet.bundle"),
            )?;
            Some(net)
        }
        (CalMode::GlobalCal, None) => None,
    };
    let dev_data = match &dev {
        Some((emb, meta, trials)) => {
            let ds = load_dataset(emb, meta)?;
            let trials = match trials {
                Some(t) => read_trials(t)?,
                None => build_trials(&ds, cfg.data.trial_policy),
            };
            Some((ds, trials))
        }
        None => None,
    };
    let dev_set = dev_data.as_ref().map(|(ds, t)| DevSet {
        dataset: ds,
        trials: t,
    });

    let (model, report, multiseed) = if cfg.experiment.n_seeds > 1 {
        let Some(dev_set) = &dev_set else {
            return Err(ConfigError("experiment.n_seeds > 1 needs a dev set".into()).into());
        };
        let (m, r, ms) = multiseed_train(
            cfg.experiment.n_seeds,
            &train_set,
            cnet.as_ref(),
            &cfg.backend,
            dev_set,
            &cfg.train,
        )?;
        (m, r, Some(ms))
    } else {
        let init = initialize(
            &train_set,
            cnet,
            &cfg.backend,
            cfg.train.prior,
            cfg.train.seed,
        )?;
        let (m, r) = train(&init, &train_set, dev_set.as_ref(), &cfg.train)?;
        (m, r, None)
    };
    let out = &common.out_dir;
    save_model(&model, &bundle_info(&cfg)?, &out.join("model.bundle"))?;
    write(&out.join("train_report.jsonl"), report.to_jsonl())?;
    let summary = json!({
        "mode": model.mode.as_str(),
        "best_step": report.best_step,
        "best_dev": report.best_dev,
        "stage1_dev": report.stage1_dev,
        "stage2_best_dev": report.stage2_best_dev,
        "skipped_batches": report.skipped_batches,
        "dev_alpha_range": report.dev_alpha_range,
        "multiseed": multiseed,
    });
    write(
        &out.join("train_summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

fn cmd_baseline(common: &Common, data: &DataPaths) -> Result<()> {
    let cfg = prepare(common)?;
    let train_set = load(data)?;
    let model = train_baseline(
        &train_set,
        &cfg.backend,
        cfg.train.prior,
        cfg.train.seed,
        cfg.experiment.baseline_domain.as_deref(),
    )?;
    save_model(
        &model,
        &bundle_info(&cfg)?,
        &common.out_dir.join("model.bundle"),
    )?;
    Ok(())
}

fn cmd_score(common: &Common, data: &DataPaths, model: &Path, trials: Option<&Path>) -> Result<()> {
    let cfg = prepare(common)?;
    let (model, _) = load_model(model)?;
    let ds = load(data)?;
    let trials = match trials {
        Some(p) => read_trials(p)?,
        None => build_trials(&ds, cfg.data.trial_policy),
    };
    if trials.is_empty() {
        bail!(dplda_core::Error::Invalid("no trials to score".into()));
    }
    let scores = model.score_trials(&ds, &trials)?;
    write_scores(&common.out_dir.join("scores.tsv"), &scores)?;
    log::info!("scored {} trials", trials.len());
    Ok(())
}

fn cmd_eval(common: &Common, scores: &Path) -> Result<()> {
    prepare(common)?;
    let report = evaluate_scores(&read_scores(scores)?)?;
    write(&common.out_dir.join("eval.tsv"), report.to_tsv())?;
    write(
        &common.out_dir.join("eval.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "actual_cllr {:.6}\tmin_cllr {:.6}\teer {:.6}",
        report.actual_cllr, report.min_cllr, report.eer
    );
    Ok(())
}
