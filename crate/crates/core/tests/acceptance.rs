//! Acceptance battery: nine end-to-end checks of the margin-loss
//! laboratory, one test per criterion, each printing a single summary
//! line (run with `--nocapture` to see the measured numbers).
//!
//! Criteria 4–8 run the fixed synthetic protocol: a ten-class long-tailed
//! problem (imbalance 100, head class 500 samples), a small tanh MLP with
//! a cosine head, and five paired seeds per training arm. Every tolerance
//! is pinned below, next to the constant it guards.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};

use dbm_core::analysis::{
    angular_distances_deg, class_separability, fisher_ratio, group_accuracy, GroupThresholds,
};
use dbm_core::data::{generate, load_dataset, save_dataset_binary, save_dataset_csv, GenConfig};
use dbm_core::gradcheck;
use dbm_core::losses::{
    baseline_positive_logit, class_margins, cosine_loss, logit_loss, BaseLoss, BaselineMargin,
    ClassPrior, LossSpec, MarginConfig, MarginMode,
};
use dbm_core::model::{forward, init_model, predict, HeadKind, ModelParams, ModelSpec};
use dbm_core::train::{load_checkpoint, save_checkpoint, train, EpochLog, TrainConfig};

// --- pinned tolerances and budgets -----------------------------------------

/// Loss-level gradient agreement (criterion 1).
const GRAD_LOSS_TOL: f64 = 1e-6;
/// Model-level gradient agreement (criterion 1).
const GRAD_MODEL_TOL: f64 = 1e-5;
/// Whole gradient gauntlet must finish inside this budget (criterion 1).
const GRADCHECK_BUDGET_SECS: f64 = 60.0;
/// Disabled margins must reproduce their base loss this closely (criterion 2).
const PER_SAMPLE_IDENTITY_TOL: f64 = 1e-12;
/// ...and whole training curves this closely (criterion 2).
const CURVE_IDENTITY_TOL: f64 = 1e-10;
/// Closed-form spot values (criterion 3).
const SPOT_TOL: f64 = 1e-9;
/// Accuracy slack, in fraction-of-one units: 0.5 accuracy points (criteria 4, 7, 8).
const ACC_SLACK: f64 = 0.005;
/// Paired-seed wins required for the direction-only claims (criteria 5, 6).
const MIN_WINS: usize = 4;
/// Per-run wall-clock budget for protocol training runs (criterion 4).
const RUN_BUDGET_SECS: f64 = 120.0;

// --- the synthetic protocol -------------------------------------------------

const CLASSES: usize = 10;
const DIM: usize = 32;
const IMBALANCE: f64 = 100.0;
const MAX_COUNT: usize = 500;
const TEST_PER_CLASS: usize = 100;
const INTRA_STD: f64 = 0.35;
const CENTER_NORM: f64 = 1.0;
const SEEDS: u64 = 5;
const EPOCHS: usize = 30;

fn protocol_data_cfg(seed: u64) -> GenConfig {
    GenConfig {
        classes: CLASSES,
        dim: DIM,
        imbalance: IMBALANCE,
        max_count: MAX_COUNT,
        test_per_class: TEST_PER_CLASS,
        intra_std: INTRA_STD,
        center_norm: CENTER_NORM,
        seed: 1000 + seed,
    }
}

fn protocol_model_spec() -> ModelSpec {
    ModelSpec {
        input: DIM,
        hidden: vec![64],
        feature: 16,
        classes: CLASSES,
        head: HeadKind::Cosine,
    }
}

fn protocol_train_cfg(loss: LossSpec, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        batch_size: 64,
        lr0: 0.1,
        momentum: 0.9,
        weight_decay: 2e-4,
        warmup_epochs: 5,
        drw_epoch: None,
        drw_beta: 0.9999,
        loss,
        seed,
    }
}

/// Everything the protocol criteria read off one training run.
#[derive(Clone)]
struct ProtocolRun {
    overall: f64,
    few: f64,
    /// Mean test-set angle to the own-class head row, in degrees.
    theta_mean: f64,
    /// Mean per-class separability of row-normalized test features. The
    /// cosine classifier scores directions only, so separability is
    /// measured on the unit sphere where the margins act.
    sep_mean: f64,
    loss_curve: Vec<f64>,
    secs: f64,
}

fn normalize_rows(a: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = a.to_owned();
    for mut row in out.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

fn run_protocol(loss: &LossSpec, seed: u64) -> ProtocolRun {
    let t0 = Instant::now();
    let data = generate(&protocol_data_cfg(seed)).expect("protocol data generates");
    let model = init_model(&protocol_model_spec(), seed).expect("valid model spec");
    let cfg = protocol_train_cfg(*loss, seed);
    let (model, logs) = train(model, &data.train, Some(&data.test), &cfg).expect("training runs");

    let cache = forward(&model, data.test.features().view()).expect("forward pass");
    let preds = predict(&model, data.test.features().view()).expect("prediction");
    let groups = GroupThresholds::default().groups(data.train.prior().unwrap().counts());
    let acc = group_accuracy(&preds, data.test.labels(), &groups).expect("group accuracy");
    let head = model.cosine_head(32.0).expect("cosine head");
    let theta = angular_distances_deg(cache.features(), data.test.labels(), &head)
        .expect("angular distances");
    let sep = class_separability(
        normalize_rows(cache.features()).view(),
        data.test.labels(),
        CLASSES,
        None,
    )
    .expect("separability");

    ProtocolRun {
        overall: acc.overall,
        few: acc.few.expect("the protocol has few-shot classes"),
        theta_mean: theta.iter().sum::<f64>() / theta.len() as f64,
        sep_mean: sep.iter().sum::<f64>() / sep.len() as f64,
        loss_curve: logs.iter().map(|l: &EpochLog| l.mean_loss).collect(),
        secs: t0.elapsed().as_secs_f64(),
    }
}

/// Protocol runs are shared across criteria; compute each (loss, seed)
/// combination once per test process.
fn cached_run(loss: &LossSpec, seed: u64) -> ProtocolRun {
    static CACHE: OnceLock<Mutex<HashMap<String, ProtocolRun>>> = OnceLock::new();
    let key = format!("{}#{seed}", serde_json::to_string(loss).expect("spec serializes"));
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("cache lock");
    map.entry(key).or_insert_with(|| run_protocol(loss, seed)).clone()
}

fn seed_runs(loss: &LossSpec) -> Vec<ProtocolRun> {
    (0..SEEDS).map(|s| cached_run(loss, s)).collect()
}

fn mean<T: Fn(&ProtocolRun) -> f64>(runs: &[ProtocolRun], get: T) -> f64 {
    runs.iter().map(&get).sum::<f64>() / runs.len() as f64
}

fn bs_spec() -> LossSpec {
    LossSpec::plain(BaseLoss::Bs)
}

fn dbm_bs_spec() -> LossSpec {
    LossSpec::dbm(BaseLoss::Bs, MarginConfig::default_dbm())
}

// --- criteria ---------------------------------------------------------------

#[test]
fn criterion_1_gradient_gauntlet() {
    let t0 = Instant::now();
    let summaries = gradcheck::run_all(100, 100, 42, None);
    let elapsed = t0.elapsed().as_secs_f64();

    let total_cases: usize = summaries.iter().map(|s| s.cases).sum();
    let worst = summaries.iter().map(|s| s.worst_rel).fold(0.0, f64::max);
    for s in &summaries {
        let expected_tol = if s.label == "model backward" {
            GRAD_MODEL_TOL
        } else {
            GRAD_LOSS_TOL
        };
        assert_eq!(s.tolerance, expected_tol, "{}: tolerance drifted", s.label);
        assert!(
            s.passed(),
            "{}: {}/{} gradient cases failed (worst rel {:.3e})",
            s.label,
            s.failures,
            s.cases,
            s.worst_rel
        );
    }
    assert!(total_cases >= 1000, "only {total_cases} gradient cases");
    assert!(
        elapsed < GRADCHECK_BUDGET_SECS,
        "gradient gauntlet took {elapsed:.1}s"
    );
    println!(
        "criterion 1: PASS - {} families, {} cases, worst rel {:.3e}, {:.2}s",
        summaries.len(),
        total_cases,
        worst,
        elapsed
    );
}

#[test]
fn criterion_2_reduction_identities() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);

    // Per-sample: a zero margin budget (k = 0) and a disabled margin mode
    // must reproduce the base loss exactly, for every base.
    let k_zero = MarginConfig {
        k: 0.0,
        ..MarginConfig::default_dbm()
    };
    let mode_none = MarginConfig {
        mode: MarginMode::None,
        ..MarginConfig::default_dbm()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let classes = rng.random_range(2..=10usize);
        let cos: Vec<f64> = (0..classes).map(|_| rng.random_range(-0.95..0.95)).collect();
        let y = rng.random_range(0..classes);
        let counts: Vec<usize> = (0..classes).map(|_| rng.random_range(1..=500usize)).collect();
        let prior = ClassPrior::new(counts).unwrap();
        for base in [BaseLoss::Ce, BaseLoss::Cb, BaseLoss::Bs] {
            let plain = cosine_loss(&cos, y, &prior, &LossSpec::plain(base)).unwrap();
            for cfg in [k_zero, mode_none] {
                let reduced = cosine_loss(&cos, y, &prior, &LossSpec::dbm(base, cfg)).unwrap();
                let diff = (reduced.loss - plain.loss).abs();
                worst = worst.max(diff);
                assert!(
                    diff <= PER_SAMPLE_IDENTITY_TOL,
                    "{base:?}/{:?}: reduced loss differs by {diff:.3e}",
                    cfg.mode
                );
            }
        }
    }

    // End to end: whole training curves coincide.
    let base_run = cached_run(&bs_spec(), 0);
    let k_zero_run = cached_run(&LossSpec::dbm(BaseLoss::Bs, k_zero), 0);
    let none_run = cached_run(&LossSpec::dbm(BaseLoss::Bs, mode_none), 0);
    let mut curve_worst: f64 = 0.0;
    for other in [&k_zero_run, &none_run] {
        assert_eq!(base_run.loss_curve.len(), other.loss_curve.len());
        for (a, b) in base_run.loss_curve.iter().zip(&other.loss_curve) {
            let diff = (a - b).abs();
            curve_worst = curve_worst.max(diff);
            assert!(diff <= CURVE_IDENTITY_TOL, "curves diverge by {diff:.3e}");
        }
    }
    println!(
        "criterion 2: PASS - per-sample worst {worst:.3e} (tol {PER_SAMPLE_IDENTITY_TOL:.0e}), \
         curve worst {curve_worst:.3e} (tol {CURVE_IDENTITY_TOL:.0e})"
    );
}

#[test]
fn criterion_3_closed_form_spot_values() {
    // Class margins for counts (100, 1) at k = 0.1, tau = 1.
    let prior = ClassPrior::new(vec![100, 1]).unwrap();
    let margins = class_margins(&prior, 0.1, 1.0);
    assert!((margins[0] - 0.001).abs() < SPOT_TOL, "head margin {}", margins[0]);
    assert!((margins[1] - 0.1).abs() < SPOT_TOL, "tail margin {}", margins[1]);

    // LDAM positive logit at n_y = 16, m = 0.5, cos theta = 0.6.
    let ldam = baseline_positive_logit(&BaselineMargin::Ldam { m: 0.5 }, 0.6, 16).unwrap();
    assert!((ldam.psi - 0.35).abs() < SPOT_TOL, "ldam psi {}", ldam.psi);

    // Balanced softmax with equal logits and priors (0.9, 0.1), y = 1.
    let bs_prior = ClassPrior::new(vec![9, 1]).unwrap();
    let bs = logit_loss(&[0.7, 0.7], 1, &bs_prior, BaseLoss::Bs, 0.9999).unwrap();
    let expected = -(0.1f64).ln();
    assert!((bs.loss - expected).abs() < SPOT_TOL, "bs loss {}", bs.loss);

    // Fisher criterion for one-dimensional classes {0, 2} and {4, 6}.
    let j = fisher_ratio(&[0.0, 2.0], &[4.0, 6.0]);
    assert!((j - 8.0).abs() < SPOT_TOL, "fisher {j}");

    println!(
        "criterion 3: PASS - margins ({:.6}, {:.3}), ldam {:.6}, bs {:.9}, fisher {:.9} (tol {SPOT_TOL:.0e})",
        margins[0], margins[1], ldam.psi, bs.loss, j
    );
}

#[test]
fn criterion_4_dbm_bs_improves_on_bs() {
    let bs = seed_runs(&bs_spec());
    let dbm = seed_runs(&dbm_bs_spec());

    for r in bs.iter().chain(&dbm) {
        assert!(r.secs < RUN_BUDGET_SECS, "protocol run took {:.1}s", r.secs);
    }
    let bs_few = mean(&bs, |r| r.few);
    let dbm_few = mean(&dbm, |r| r.few);
    let bs_over = mean(&bs, |r| r.overall);
    let dbm_over = mean(&dbm, |r| r.overall);

    assert!(
        dbm_few >= bs_few,
        "few-group accuracy regressed: {bs_few:.4} -> {dbm_few:.4}"
    );
    assert!(
        dbm_over >= bs_over - ACC_SLACK,
        "overall accuracy fell past the slack: {bs_over:.4} -> {dbm_over:.4}"
    );
    println!(
        "criterion 4: PASS - few {bs_few:.4} -> {dbm_few:.4}, overall {bs_over:.4} -> {dbm_over:.4} \
         (slack {ACC_SLACK}), slowest run {:.2}s",
        bs.iter().chain(&dbm).map(|r| r.secs).fold(0.0, f64::max)
    );
}

#[test]
fn criterion_5_intra_class_compactness() {
    let bs = seed_runs(&bs_spec());
    let dbm = seed_runs(&dbm_bs_spec());
    let wins = bs
        .iter()
        .zip(&dbm)
        .filter(|(b, d)| d.theta_mean < b.theta_mean)
        .count();
    assert!(
        wins >= MIN_WINS,
        "mean angle shrank in only {wins}/{SEEDS} seeds"
    );
    println!(
        "criterion 5: PASS - mean angle lower in {wins}/{SEEDS} seeds \
         (means {:.2} deg -> {:.2} deg)",
        mean(&bs, |r| r.theta_mean),
        mean(&dbm, |r| r.theta_mean)
    );
}

#[test]
fn criterion_6_inter_class_separability() {
    let bs = seed_runs(&bs_spec());
    let dbm = seed_runs(&dbm_bs_spec());
    let wins = bs
        .iter()
        .zip(&dbm)
        .filter(|(b, d)| d.sep_mean >= b.sep_mean)
        .count();
    assert!(
        wins >= MIN_WINS,
        "separability improved in only {wins}/{SEEDS} seeds"
    );
    println!(
        "criterion 6: PASS - separability kept or improved in {wins}/{SEEDS} seeds \
         (means {:.3} -> {:.3})",
        mean(&bs, |r| r.sep_mean),
        mean(&dbm, |r| r.sep_mean)
    );
}

#[test]
fn criterion_7_ablation_ordering() {
    let cos_only = seed_runs(&LossSpec::plain(BaseLoss::Ce));
    let class_only = seed_runs(&LossSpec::dbm(
        BaseLoss::Ce,
        MarginConfig {
            mode: MarginMode::ClassOnly,
            ..MarginConfig::default_dbm()
        },
    ));
    let full = seed_runs(&LossSpec::dbm(BaseLoss::Ce, MarginConfig::default_dbm()));

    let a = mean(&full, |r| r.overall);
    let b = mean(&class_only, |r| r.overall);
    let c = mean(&cos_only, |r| r.overall);
    assert!(a >= b - ACC_SLACK, "full margin {a:.4} below class-only {b:.4}");
    assert!(b >= c - ACC_SLACK, "class-only {b:.4} below plain cosine {c:.4}");
    println!(
        "criterion 7: PASS - cosine {c:.4} <= class-margin {b:.4} <= full {a:.4} \
         (slack {ACC_SLACK})"
    );
}

#[test]
fn criterion_8_hyperparameter_robustness() {
    let bs_over = mean(&seed_runs(&bs_spec()), |r| r.overall);
    let mut cells = Vec::new();
    for k in [0.05, 0.1, 0.2] {
        for tau in [0.5, 1.0, 2.0] {
            let spec = LossSpec::dbm(
                BaseLoss::Bs,
                MarginConfig {
                    k,
                    tau,
                    ..MarginConfig::default_dbm()
                },
            );
            let over = mean(&seed_runs(&spec), |r| r.overall);
            assert!(
                over >= bs_over - ACC_SLACK,
                "k {k}, tau {tau}: overall {over:.4} fell past {bs_over:.4} - {ACC_SLACK}"
            );
            cells.push(over);
        }
    }
    let lo = cells.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = cells.iter().cloned().fold(0.0, f64::max);
    println!(
        "criterion 8: PASS - 9 (k, tau) cells in [{lo:.4}, {hi:.4}] vs base {bs_over:.4} \
         (slack {ACC_SLACK})"
    );
}

#[test]
fn criterion_9_determinism_and_round_trips() {
    let dir = std::env::temp_dir().join(format!("dbm-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();

    // Identical (config, seed) reruns: byte-identical logs and parameters.
    let data = generate(&protocol_data_cfg(0)).unwrap();
    let cfg = protocol_train_cfg(dbm_bs_spec(), 0);
    let run = |cfg: &TrainConfig| {
        let model = init_model(&protocol_model_spec(), 0).unwrap();
        let (model, logs) = train(model, &data.train, Some(&data.test), cfg).unwrap();
        (
            serde_json::to_string(&model).unwrap(),
            serde_json::to_string(&logs).unwrap(),
        )
    };
    let (m1, l1) = run(&cfg);
    let (m2, l2) = run(&cfg);
    assert_eq!(m1, m2, "model parameters differ between identical reruns");
    assert_eq!(l1, l2, "metrics differ between identical reruns");

    // Dataset round-trips, binary and text, must be bit-exact.
    let bin = dir.join("train.dbm");
    let csv = dir.join("train.csv");
    save_dataset_binary(&data.train, &bin).unwrap();
    save_dataset_csv(&data.train, &csv).unwrap();
    for path in [&bin, &csv] {
        let back = load_dataset(path).unwrap();
        assert_eq!(back.labels(), data.train.labels());
        let same_bits = back
            .features()
            .iter()
            .zip(data.train.features().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same_bits, "{} round-trip changed feature bits", path.display());
    }

    // Checkpoint round-trip must restore every double exactly.
    let model: ModelParams = serde_json::from_str(&m1).unwrap();
    let ckpt_path = dir.join("checkpoint.json");
    save_checkpoint(&ckpt_path, &model, &cfg).unwrap();
    let loaded = load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(loaded.model, model, "checkpoint round-trip changed parameters");

    std::fs::remove_dir_all(&dir).ok();
    println!("criterion 9: PASS - bit-identical reruns, dataset and checkpoint round-trips");
}
