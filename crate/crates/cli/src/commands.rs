//! The individual subcommands, minus `sweep` (see `sweep.rs`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use dbm_core::analysis::{
    angular_distances_deg, build_report, class_separability, GroupThresholds,
};
use dbm_core::data::{load_dataset, save_dataset_binary, save_dataset_csv, LabeledDataset};
use dbm_core::gradcheck;
use dbm_core::losses::ClassPrior;
use dbm_core::model::{forward, predict, HeadKind, ModelParams};
use dbm_core::train::load_checkpoint;
use dbm_core::{Error, Result};

use crate::config::{resolve_out_root, ExperimentConfig};
use crate::runner;

// --- gen-data ---------------------------------------------------------------

/// Provenance sidecar written next to the dataset files.
#[derive(Debug, Serialize, Deserialize)]
struct GenSidecar {
    label: String,
    config_hash: String,
    data: dbm_core::data::GenConfig,
    train_counts: Vec<usize>,
    test_counts: Vec<usize>,
}

pub fn gen_data(config: &Path, out: Option<&Path>, csv: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = resolve_out_root(out, cfg.out_root.as_deref())
        .join(&cfg.label)
        .join("data");
    std::fs::create_dir_all(&dir)?;

    let data = dbm_core::data::generate(&cfg.data)?;
    save_dataset_binary(&data.train, &dir.join("train.dbm"))?;
    save_dataset_binary(&data.test, &dir.join("test.dbm"))?;
    if csv {
        save_dataset_csv(&data.train, &dir.join("train.csv"))?;
        save_dataset_csv(&data.test, &dir.join("test.csv"))?;
    }

    let train_prior = data.train.prior()?;
    let test_prior = data.test.prior()?;
    let sidecar = GenSidecar {
        label: cfg.label.clone(),
        config_hash: cfg.hash(),
        data: cfg.data.clone(),
        train_counts: train_prior.counts().to_vec(),
        test_counts: test_prior.counts().to_vec(),
    };
    std::fs::write(
        dir.join("gen.json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;

    println!("wrote {}", dir.display());
    println!("class  train  test  group");
    let groups = cfg.groups.groups(train_prior.counts());
    for (c, (&n, g)) in train_prior.counts().iter().zip(&groups).enumerate() {
        println!("{c:>5}  {n:>5}  {:>4}  {g}", test_prior.counts()[c]);
    }
    println!(
        "total  {:>5}  {:>4}",
        data.train.len(),
        data.test.len()
    );
    Ok(())
}

// --- train ------------------------------------------------------------------

pub fn train_cmd(
    config: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    data_dir: Option<&Path>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.train.seed);
    let data = runner::load_or_generate(&cfg, data_dir, 0)?;
    let outcome = runner::execute(&cfg, &data, seed)?;

    let root = resolve_out_root(out, cfg.out_root.as_deref());
    let dir = runner::run_dir(&root, &cfg.label, seed);
    runner::write_artifacts(&dir, &cfg, &outcome, seed)?;

    let last = outcome.logs.last().expect("at least one epoch");
    println!(
        "{label} seed {seed}: overall {overall:.4}, final loss {loss:.6} -> {dir}",
        label = cfg.label,
        overall = outcome.accuracy.overall,
        loss = last.mean_loss,
        dir = dir.display()
    );
    Ok(())
}

// --- eval -------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ClassEval {
    class: usize,
    test_count: usize,
    group_count: usize,
    accuracy: Option<f64>,
    /// The wrong label this class is most often predicted as.
    most_confused_with: Option<usize>,
    confusions: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalReport {
    overall: f64,
    many: Option<f64>,
    medium: Option<f64>,
    few: Option<f64>,
    thresholds: GroupThresholds,
    per_class: Vec<ClassEval>,
}

fn load_model(checkpoint: &Path) -> Result<ModelParams> {
    Ok(load_checkpoint(checkpoint)?.model)
}

/// Class counts used for grouping: a separate (training) dataset when
/// given, otherwise the evaluated dataset itself.
fn grouping_counts(eval_data: &LabeledDataset, counts_from: Option<&Path>) -> Result<ClassPrior> {
    match counts_from {
        Some(path) => load_dataset(path)?.prior(),
        None => eval_data.prior(),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn eval_cmd(
    checkpoint: &Path,
    dataset: &Path,
    counts_from: Option<&Path>,
    many_min: usize,
    few_max: usize,
    out: Option<&Path>,
) -> Result<()> {
    let thresholds = GroupThresholds { many_min, few_max };
    thresholds.validate()?;
    let model = load_model(checkpoint)?;
    let data = load_dataset(dataset)?;

    let prior = grouping_counts(&data, counts_from)?;
    if prior.classes() != model.spec.classes {
        return Err(Error::shape(
            format!("{} classes (checkpoint)", model.spec.classes),
            format!("{} classes (grouping counts)", prior.classes()),
        ));
    }
    let groups = thresholds.groups(prior.counts());
    let preds = predict(&model, data.features().view())?;
    let acc = dbm_core::analysis::group_accuracy(&preds, data.labels(), &groups)?;

    // Confusion summary: for each true class, the most frequent wrong
    // prediction (lowest index wins ties).
    let classes = model.spec.classes;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut test_counts = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(data.labels()) {
        test_counts[y] += 1;
        if p != y {
            confusion[y][p] += 1;
        }
    }
    let per_class = (0..classes)
        .map(|c| {
            let (most, n) = confusion[c]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, &n)| (i, n))
                .unwrap_or((0, 0));
            ClassEval {
                class: c,
                test_count: test_counts[c],
                group_count: prior.count(c),
                accuracy: acc.per_class[c],
                most_confused_with: (n > 0).then_some(most),
                confusions: n,
            }
        })
        .collect();

    let report = EvalReport {
        overall: acc.overall,
        many: acc.many,
        medium: acc.medium,
        few: acc.few,
        thresholds,
        per_class,
    };
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, &json)?;
            println!("overall {:.4} -> {}", report.overall, path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

// --- analyze ----------------------------------------------------------------

pub fn analyze_cmd(
    checkpoint: &Path,
    dataset: &Path,
    counts_from: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.model;
    let data = load_dataset(dataset)?;
    let prior = grouping_counts(&data, counts_from)?;
    if prior.classes() != model.spec.classes {
        return Err(Error::shape(
            format!("{} classes (checkpoint)", model.spec.classes),
            format!("{} classes (grouping counts)", prior.classes()),
        ));
    }

    let cache = forward(&model, data.features().view())?;
    let preds = predict(&model, data.features().view())?;
    let groups = GroupThresholds::default().groups(prior.counts());

    // Angular statistics exist only for cosine heads; a linear head's
    // report simply omits that section.
    let theta = match model.spec.head {
        HeadKind::Cosine => {
            let head = model.cosine_head(ckpt.train.loss.scale())?;
            Some(angular_distances_deg(
                cache.features(),
                data.labels(),
                &head,
            )?)
        }
        HeadKind::Linear => None,
    };
    let sep = class_separability(cache.features(), data.labels(), model.spec.classes, None)?;

    let report = build_report(
        &preds,
        data.labels(),
        prior.counts(),
        &groups,
        theta.as_deref(),
        Some(&sep),
    )?;

    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => resolve_out_root(None, None).join("analysis"),
    };
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(dir.join("report.csv"), report.to_csv())?;
    println!(
        "overall {:.4}, angular {} -> {}",
        report.accuracy.overall,
        if report.angular.is_some() {
            "present"
        } else {
            "absent (linear head)"
        },
        dir.display()
    );
    Ok(())
}

// --- gradcheck --------------------------------------------------------------

pub fn gradcheck_cmd(
    cases: usize,
    model_cases: usize,
    seed: u64,
    perturb: Option<f64>,
) -> Result<()> {
    let summaries = gradcheck::run_all(cases, model_cases, seed, perturb);
    println!("{:<22} {:>6} {:>9} {:>12} {:>10}", "family", "cases", "failures", "worst-rel", "tolerance");
    for s in &summaries {
        println!(
            "{:<22} {:>6} {:>9} {:>12.3e} {:>10.0e}",
            s.label, s.cases, s.failures, s.worst_rel, s.tolerance
        );
    }
    gradcheck::verdict(&summaries)?;
    let total: usize = summaries.iter().map(|s| s.cases).sum();
    println!("gradient check passed ({total} cases)");
    Ok(())
}
