//! Finite-difference verification of every analytic gradient.
//!
//! The reference losses here are written from scratch — fresh `acos`,
//! fresh log-sum-exp, fresh margin arithmetic — and never call into the
//! loss module, so a shared algebra slip cannot cancel out. Central
//! differences of the reference are compared against the analytic
//! gradients, case by case, with the error measured as a whole-vector
//! relative norm.
//!
//! Two subtleties:
//!
//! - *Detached* margins are, by definition, treated as constants during
//!   backpropagation, so the reference freezes the margin (and the
//!   hard-positive indicator) at its base-point value before
//!   differencing. *Through* margins recompute the instance term from the
//!   perturbed cosine; only the indicator stays frozen.
//! - Branch points (the saturation at `pi`, hard/easy ties, the `acos`
//!   pole clamp) make one-sided kinks; sampled cases that sit within a
//!   guard band of a branch are redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    BaseLoss, BaselineMargin, ClassPrior, GradientMode, LossSpec, MarginConfig, MarginMode,
};
use crate::model::{backward, init_model, HeadKind, ModelSpec};
use crate::train::batch_loss;

/// Central-difference step for loss-space checks.
pub const FD_STEP: f64 = 2e-5;
/// Central-difference step for parameter-space checks.
pub const FD_STEP_MODEL: f64 = 1e-5;
/// Loss-level gradients must agree to this relative error.
pub const LOSS_TOLERANCE: f64 = 1e-6;
/// Whole-model gradients must agree to this relative error.
pub const MODEL_TOLERANCE: f64 = 1e-5;
/// Relative-error denominators are floored at `this * scale * weight` so
/// that vanishing gradients (saturated softmax) measure FD roundoff
/// against the loss's natural magnitude instead of dividing by zero.
const REL_FLOOR: f64 = 1e-4;
/// Redraw a case when a branch point lies closer than this to the base.
const BRANCH_GUARD: f64 = 1e-3;

/// Outcome of one batch of checks.
#[derive(Debug, Clone)]
pub struct CheckSummary {
    pub label: String,
    pub cases: usize,
    pub failures: usize,
    pub worst_rel: f64,
    pub tolerance: f64,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Fails with [`Error::GradCheckFailed`] when any summary has failures.
pub fn verdict(summaries: &[CheckSummary]) -> Result<()> {
    let failures: usize = summaries.iter().map(|s| s.failures).sum();
    if failures > 0 {
        let cases = summaries.iter().map(|s| s.cases).sum();
        let worst = summaries.iter().map(|s| s.worst_rel).fold(0.0, f64::max);
        return Err(Error::GradCheckFailed {
            failures,
            cases,
            worst,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reference formulas (deliberately self-contained).

fn ref_acos(c: f64) -> f64 {
    c.clamp(-1.0 + 1e-7, 1.0 - 1e-7).acos()
}

fn ref_angle_add(c: f64, margin: f64) -> f64 {
    let theta = ref_acos(c);
    if theta + margin > std::f64::consts::PI {
        -1.0
    } else {
        (theta + margin).cos()
    }
}

fn ref_lse(z: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &v in z {
        if v > m {
            m = v;
        }
    }
    let mut acc = 0.0;
    for &v in z {
        acc += (v - m).exp();
    }
    m + acc.ln()
}

fn ref_cb_weight(beta: f64, n: usize) -> f64 {
    (1.0 - beta) / (1.0 - beta.powf(n as f64))
}

#[derive(Debug, Clone, Copy)]
enum Family {
    Plain,
    Sphere { m: u32 },
    CosSub { m: f64 },
    AngleAdd { m: f64 },
    CountSub { m: f64 },
    Dbm(MarginConfig),
}

/// Base-point state captured before differencing.
#[derive(Debug, Clone, Copy, Default)]
struct Frozen {
    total_margin: f64,
    class_margin: f64,
    instance_applied: bool,
}

fn freeze(family: &Family, cos: &[f64], y: usize, counts: &[usize]) -> Frozen {
    match family {
        Family::Dbm(cfg) => {
            let n_min = *counts.iter().min().expect("non-empty") as f64;
            let m_c = cfg.k * (counts[y] as f64 / n_min).powf(-cfg.tau);
            let hard = cos
                .iter()
                .enumerate()
                .any(|(i, &c)| i != y && c >= cos[y]);
            let applied = match cfg.mode {
                MarginMode::None | MarginMode::ClassOnly => false,
                MarginMode::AllPositives => true,
                MarginMode::HardPositives => hard,
            };
            let m_i = if applied {
                m_c * (1.0 - cos[y]) / 2.0
            } else {
                0.0
            };
            let total = if cfg.mode == MarginMode::None {
                0.0
            } else {
                m_c + m_i
            };
            Frozen {
                total_margin: total,
                class_margin: m_c,
                instance_applied: applied,
            }
        }
        _ => Frozen::default(),
    }
}

/// The reference loss value, differentiated numerically by the callers.
fn ref_loss(
    family: &Family,
    frozen: &Frozen,
    base: BaseLoss,
    beta: f64,
    cos: &[f64],
    y: usize,
    counts: &[usize],
    scale: f64,
) -> f64 {
    let c_y = cos[y];
    let psi = match *family {
        Family::Plain => c_y,
        Family::Sphere { m } => (f64::from(m) * ref_acos(c_y)).cos(),
        Family::CosSub { m } => c_y - m,
        Family::AngleAdd { m } => ref_angle_add(c_y, m),
        Family::CountSub { m } => c_y - m * (counts[y] as f64).powf(-0.25),
        Family::Dbm(cfg) => {
            if frozen.total_margin == 0.0 {
                c_y
            } else {
                match cfg.gradient {
                    GradientMode::Detached => ref_angle_add(c_y, frozen.total_margin),
                    GradientMode::Through => {
                        let m_i = if frozen.instance_applied {
                            frozen.class_margin * (1.0 - c_y) / 2.0
                        } else {
                            0.0
                        };
                        ref_angle_add(c_y, frozen.class_margin + m_i)
                    }
                }
            }
        }
    };

    let mut z: Vec<f64> = cos.iter().map(|&c| c * scale).collect();
    z[y] = psi * scale;
    if base == BaseLoss::Bs {
        let total: usize = counts.iter().sum();
        for (zi, &n) in z.iter_mut().zip(counts) {
            *zi += (n as f64 / total as f64).ln();
        }
    }
    let w = if base == BaseLoss::Cb {
        ref_cb_weight(beta, counts[y])
    } else {
        1.0
    };
    w * (ref_lse(&z) - z[y])
}

// ---------------------------------------------------------------------------
// Loss-level checks.

struct LossCase {
    cos: Vec<f64>,
    y: usize,
    counts: Vec<usize>,
    scale: f64,
    beta: f64,
}

/// Draws a case, redrawing the cosines while the saturation branch is
/// within the guard band of the configured margin.
fn sample_case(rng: &mut ChaCha8Rng, family: &Family) -> LossCase {
    let classes = rng.random_range(2..=8usize);
    let y = rng.random_range(0..classes);
    let counts: Vec<usize> = (0..classes).map(|_| rng.random_range(1..=400usize)).collect();
    let scale = rng.random_range(4.0..32.0);
    let beta = [0.9, 0.99, 0.999, 0.9999][rng.random_range(0..4usize)];
    loop {
        let cos: Vec<f64> = (0..classes).map(|_| rng.random_range(-0.9..0.9)).collect();
        let frozen = freeze(family, &cos, y, &counts);
        let margin = match family {
            Family::AngleAdd { m } => *m,
            Family::Dbm(_) => frozen.total_margin,
            _ => 0.0, // no saturating branch to guard
        };
        if margin > 0.0 {
            let theta = ref_acos(cos[y]);
            if (theta + margin - std::f64::consts::PI).abs() < BRANCH_GUARD {
                continue;
            }
        }
        return LossCase {
            cos,
            y,
            counts,
            scale,
            beta,
        };
    }
}

fn loss_spec_for(family: &Family, base: BaseLoss, scale: f64, beta: f64) -> LossSpec {
    let disabled = MarginConfig {
        scale,
        ..MarginConfig::disabled()
    };
    let mut spec = match *family {
        Family::Plain => LossSpec {
            base,
            cb_beta: beta,
            margin: disabled,
            baseline: None,
        },
        Family::Sphere { m } => LossSpec {
            base,
            cb_beta: beta,
            margin: disabled,
            baseline: Some(BaselineMargin::SphereFace { m }),
        },
        Family::CosSub { m } => LossSpec {
            base,
            cb_beta: beta,
            margin: disabled,
            baseline: Some(BaselineMargin::CosFace { m }),
        },
        Family::AngleAdd { m } => LossSpec {
            base,
            cb_beta: beta,
            margin: disabled,
            baseline: Some(BaselineMargin::ArcFace { m }),
        },
        Family::CountSub { m } => LossSpec {
            base,
            cb_beta: beta,
            margin: disabled,
            baseline: Some(BaselineMargin::Ldam { m }),
        },
        Family::Dbm(cfg) => LossSpec {
            base,
            cb_beta: beta,
            margin: cfg,
            baseline: None,
        },
    };
    spec.margin.scale = scale;
    spec
}

/// Relative error between two gradient vectors, floored as in [`REL_FLOOR`].
fn vector_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor)
}

fn check_family(
    label: &str,
    family: Family,
    base: BaseLoss,
    cases: usize,
    rng: &mut ChaCha8Rng,
    inject: Option<f64>,
) -> CheckSummary {
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let case = sample_case(rng, &family);
        let prior = ClassPrior::new(case.counts.clone()).expect("positive counts");
        let spec = loss_spec_for(&family, base, case.scale, case.beta);
        let out = crate::losses::cosine_loss(&case.cos, case.y, &prior, &spec)
            .expect("sampled cases are valid");
        let mut analytic = out.grad_cos;
        if let Some(delta) = inject {
            for g in analytic.iter_mut() {
                *g *= 1.0 + delta;
            }
        }

        let frozen = freeze(&family, &case.cos, case.y, &case.counts);
        let mut numeric = vec![0.0; case.cos.len()];
        for i in 0..case.cos.len() {
            let mut plus = case.cos.clone();
            let mut minus = case.cos.clone();
            plus[i] += FD_STEP;
            minus[i] -= FD_STEP;
            let fp = ref_loss(
                &family, &frozen, base, case.beta, &plus, case.y, &case.counts, case.scale,
            );
            let fm = ref_loss(
                &family, &frozen, base, case.beta, &minus, case.y, &case.counts, case.scale,
            );
            numeric[i] = (fp - fm) / (2.0 * FD_STEP);
        }

        let weight = if base == BaseLoss::Cb {
            ref_cb_weight(case.beta, case.counts[case.y])
        } else {
            1.0
        };
        let rel = vector_rel_error(&analytic, &numeric, REL_FLOOR * case.scale * weight);
        if rel > worst {
            worst = rel;
        }
        if rel > LOSS_TOLERANCE {
            failures += 1;
        }
    }
    CheckSummary {
        label: label.to_string(),
        cases,
        failures,
        worst_rel: worst,
        tolerance: LOSS_TOLERANCE,
    }
}

/// Checks every member of the loss family against the reference, with
/// `cases` random draws each. `inject` multiplies the analytic gradients
/// by `1 + delta` first — a self-test that the detector actually detects.
pub fn check_losses(cases: usize, seed: u64, inject: Option<f64>) -> Vec<CheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dbm = |mode, gradient| {
        Family::Dbm(MarginConfig {
            k: 0.15,
            tau: 1.0,
            scale: 32.0, // overwritten per-case
            mode,
            gradient,
        })
    };
    let mut jobs: Vec<(String, Family, BaseLoss)> = vec![
        ("ce".into(), Family::Plain, BaseLoss::Ce),
        ("cb".into(), Family::Plain, BaseLoss::Cb),
        ("bs".into(), Family::Plain, BaseLoss::Bs),
        ("sphereface".into(), Family::Sphere { m: 3 }, BaseLoss::Ce),
        ("cosface".into(), Family::CosSub { m: 0.25 }, BaseLoss::Ce),
        ("arcface".into(), Family::AngleAdd { m: 0.3 }, BaseLoss::Ce),
        ("ldam".into(), Family::CountSub { m: 0.5 }, BaseLoss::Ce),
    ];
    for (name, base) in [
        ("ce", BaseLoss::Ce),
        ("cb", BaseLoss::Cb),
        ("bs", BaseLoss::Bs),
    ] {
        jobs.push((
            format!("dbm-{name} (detached)"),
            dbm(MarginMode::HardPositives, GradientMode::Detached),
            base,
        ));
        jobs.push((
            format!("dbm-{name} (through)"),
            dbm(MarginMode::AllPositives, GradientMode::Through),
            base,
        ));
    }
    jobs.push((
        "dbm-ce (class-only)".into(),
        dbm(MarginMode::ClassOnly, GradientMode::Detached),
        BaseLoss::Ce,
    ));

    jobs.into_iter()
        .map(|(label, family, base)| check_family(&label, family, base, cases, &mut rng, inject))
        .collect()
}

// ---------------------------------------------------------------------------
// Model-level checks.

/// Margin choices whose analytic gradient is the *true* derivative (so a
/// parameter-space FD through the real forward pass must match): margin-
/// free bases, constant margins, and through-mode DBM away from branches.
fn model_specs(rng: &mut ChaCha8Rng, cosine: bool, scale: f64, beta: f64) -> LossSpec {
    let base = [BaseLoss::Ce, BaseLoss::Cb, BaseLoss::Bs][rng.random_range(0..3usize)];
    if !cosine {
        return LossSpec::plain(base).with_scale(scale).with_beta(beta);
    }
    let margin = MarginConfig {
        k: rng.random_range(0.02..0.25),
        tau: rng.random_range(0.0..1.5),
        scale,
        mode: MarginMode::None,
        gradient: GradientMode::Detached,
    };
    let mut spec = match rng.random_range(0..7usize) {
        0 => LossSpec::plain(base),
        1 => LossSpec {
            base,
            cb_beta: beta,
            margin: MarginConfig {
                mode: MarginMode::ClassOnly,
                ..margin
            },
            baseline: None,
        },
        2 => LossSpec {
            base,
            cb_beta: beta,
            margin: MarginConfig {
                mode: MarginMode::HardPositives,
                gradient: GradientMode::Through,
                ..margin
            },
            baseline: None,
        },
        3 => LossSpec {
            base,
            cb_beta: beta,
            margin: MarginConfig {
                mode: MarginMode::AllPositives,
                gradient: GradientMode::Through,
                ..margin
            },
            baseline: None,
        },
        4 => LossSpec::classic(BaselineMargin::CosFace { m: 0.2 }),
        5 => LossSpec::classic(BaselineMargin::ArcFace { m: 0.2 }),
        _ => LossSpec::classic(BaselineMargin::Ldam { m: 0.4 }),
    };
    spec.base = base;
    spec.cb_beta = beta;
    spec.margin.scale = scale;
    spec
}

/// Whether any sample of the batch sits near a gradient branch point for
/// the given spec (saturation, hard/easy tie, `acos` pole).
fn near_branch(scores: ndarray::ArrayView2<'_, f64>, labels: &[usize], spec: &LossSpec) -> bool {
    let margin_on = spec.has_margin();
    for (row, &y) in scores.rows().into_iter().zip(labels) {
        let c_y = row[y];
        if c_y.abs() > 0.999 {
            return true;
        }
        if !margin_on {
            continue;
        }
        let max_neg = row
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != y)
            .map(|(_, &c)| c)
            .fold(f64::NEG_INFINITY, f64::max);
        if (max_neg - c_y).abs() < 2.0 * BRANCH_GUARD {
            return true; // indicator could flip under perturbation
        }
        // Upper bound on the total margin: class margin at ratio 1 plus a
        // full-difficulty instance term.
        let bound = spec.margin.k * 2.0 + 0.5;
        if ref_acos(c_y) + bound > std::f64::consts::PI - BRANCH_GUARD {
            return true;
        }
    }
    false
}

/// Finite-difference check of the full backward pass, parameter by
/// parameter, on random small models, batches, and loss specs.
pub fn check_model(cases: usize, seed: u64, inject: Option<f64>) -> CheckSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < cases {
        let cosine = rng.random_range(0..4usize) > 0; // linear head 1 in 4
        let spec = ModelSpec {
            input: rng.random_range(2..5usize),
            hidden: match rng.random_range(0..3usize) {
                0 => vec![],
                1 => vec![rng.random_range(3..6usize)],
                _ => vec![4, 3],
            },
            feature: rng.random_range(2..5usize),
            classes: rng.random_range(2..5usize),
            head: if cosine {
                HeadKind::Cosine
            } else {
                HeadKind::Linear
            },
        };
        let model = init_model(&spec, rng.random::<u64>()).expect("valid spec");
        let n = rng.random_range(2..5usize);
        let mut x = ndarray::Array2::zeros((n, spec.input));
        for v in x.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.classes)).collect();
        let counts: Vec<usize> = (0..spec.classes)
            .map(|_| rng.random_range(1..=400usize))
            .collect();
        let prior = ClassPrior::new(counts).expect("positive counts");
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
        let scale = rng.random_range(4.0..32.0);
        let beta = 0.999;
        let loss_spec = model_specs(&mut rng, cosine, scale, beta);

        let eval = match batch_loss(&model, x.view(), &labels, &prior, &loss_spec, &weights) {
            Ok(e) => e,
            Err(_) => continue, // e.g. zero-norm feature; redraw
        };
        if near_branch(eval.cache.scores(), &labels, &loss_spec) {
            continue;
        }
        let grads = backward(&model, &eval.cache, eval.dscores.view()).expect("fresh cache");

        let count = model.param_count();
        let mut analytic = Vec::with_capacity(count);
        let mut numeric = Vec::with_capacity(count);
        let mut bad_case = false;
        for i in 0..count {
            let base_val = model.get_param(i);
            let mut probe = model.clone();
            probe.set_param(i, base_val + FD_STEP_MODEL);
            let fp = batch_loss(&probe, x.view(), &labels, &prior, &loss_spec, &weights);
            probe.set_param(i, base_val - FD_STEP_MODEL);
            let fm = batch_loss(&probe, x.view(), &labels, &prior, &loss_spec, &weights);
            match (fp, fm) {
                (Ok(p), Ok(m)) => {
                    numeric.push((p.loss - m.loss) / (2.0 * FD_STEP_MODEL));
                    analytic.push(grads.get_param(i));
                }
                _ => {
                    bad_case = true;
                    break;
                }
            }
        }
        if bad_case {
            continue;
        }
        if let Some(delta) = inject {
            for g in analytic.iter_mut() {
                *g *= 1.0 + delta;
            }
        }
        let rel = vector_rel_error(&analytic, &numeric, REL_FLOOR * scale);
        if rel > worst {
            worst = rel;
        }
        if rel > MODEL_TOLERANCE {
            failures += 1;
        }
        done += 1;
    }
    CheckSummary {
        label: "model backward".to_string(),
        cases,
        failures,
        worst_rel: worst,
        tolerance: MODEL_TOLERANCE,
    }
}

/// The full battery: every loss family member plus the model backward
/// pass. `loss_cases` draws per family, `model_cases` whole-model draws.
pub fn run_all(
    loss_cases: usize,
    model_cases: usize,
    seed: u64,
    inject: Option<f64>,
) -> Vec<CheckSummary> {
    let mut out = check_losses(loss_cases, seed, inject);
    out.push(check_model(model_cases, seed.wrapping_add(1), inject));
    out
}
