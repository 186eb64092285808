//! One training run, from config to metrics, shared by `train` and
//! `sweep`. Artifact writing lives here too so both paths emit the same
//! files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dbm_core::analysis::{group_accuracy, GroupAccuracy};
use dbm_core::data::{generate, load_dataset, LabeledDataset};
use dbm_core::model::{init_model, predict, ModelParams};
use dbm_core::train::{save_checkpoint, train, EpochLog, TrainConfig};
use dbm_core::Result;

use crate::config::ExperimentConfig;

/// The split pair a run trains and validates on.
pub struct RunData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Produces the run's data: loaded from a directory holding
/// `train.dbm`/`test.dbm` when given, otherwise generated from the
/// config with its data seed shifted by `seed_shift` (sweeps pair seeds
/// across arms this way).
pub fn load_or_generate(
    cfg: &ExperimentConfig,
    data_dir: Option<&Path>,
    seed_shift: u64,
) -> Result<RunData> {
    match data_dir {
        Some(dir) => Ok(RunData {
            train: load_dataset(&dir.join("train.dbm"))?,
            test: load_dataset(&dir.join("test.dbm"))?,
        }),
        None => {
            let mut gen_cfg = cfg.data.clone();
            gen_cfg.seed = gen_cfg.seed.wrapping_add(seed_shift);
            let data = generate(&gen_cfg)?;
            Ok(RunData {
                train: data.train,
                test: data.test,
            })
        }
    }
}

/// Outcome of a completed run, before any files are written.
pub struct RunOutcome {
    pub model: ModelParams,
    pub logs: Vec<EpochLog>,
    pub accuracy: GroupAccuracy,
    pub train_cfg: TrainConfig,
}

/// Trains per the config and scores the held-out split, grouping classes
/// by their training counts.
pub fn execute(cfg: &ExperimentConfig, data: &RunData, seed: u64) -> Result<RunOutcome> {
    let model = init_model(&cfg.model_spec(), seed)?;
    let train_cfg = cfg.train_config(Some(seed));
    let (model, logs) = train(model, &data.train, Some(&data.test), &train_cfg)?;

    let prior = data.train.prior()?;
    let groups = cfg.groups.groups(prior.counts());
    let preds = predict(&model, data.test.features().view())?;
    let accuracy = group_accuracy(&preds, data.test.labels(), &groups)?;
    Ok(RunOutcome {
        model,
        logs,
        accuracy,
        train_cfg,
    })
}

/// What `manifest.json` records: enough to reproduce and to find the rest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub config: ExperimentConfig,
    pub checkpoint: PathBuf,
    pub epochs_csv: PathBuf,
    pub final_metrics: PathBuf,
}

/// The run directory for a (label, seed) pair.
pub fn run_dir(root: &Path, label: &str, seed: u64) -> PathBuf {
    root.join(label).join(format!("seed{seed}"))
}

pub fn epochs_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,mean_loss,hard_fraction,clamped_fraction,heldout_accuracy\n");
    for l in logs {
        let heldout = l.heldout_accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            l.epoch, l.lr, l.mean_loss, l.hard_fraction, l.clamped_fraction, heldout
        )
        .expect("string write");
    }
    out
}

/// Writes checkpoint, per-epoch CSV, final metrics, and the manifest into
/// `dir`, returning the manifest.
pub fn write_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    outcome: &RunOutcome,
    seed: u64,
) -> Result<RunManifest> {
    std::fs::create_dir_all(dir)?;
    let checkpoint = dir.join("checkpoint.json");
    let epochs = dir.join("epochs.csv");
    let metrics = dir.join("final_metrics.json");

    save_checkpoint(&checkpoint, &outcome.model, &outcome.train_cfg)?;
    std::fs::write(&epochs, epochs_csv(&outcome.logs))?;
    std::fs::write(&metrics, serde_json::to_string_pretty(&outcome.accuracy)?)?;

    let manifest = RunManifest {
        label: cfg.label.clone(),
        config_hash: cfg.hash(),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        checkpoint,
        epochs_csv: epochs,
        final_metrics: metrics,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}
