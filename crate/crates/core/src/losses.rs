//! The margin-loss family.
//!
//! Every loss here operates on the *raw cosines* between a feature and the
//! classifier rows, replaces the true-class cosine with a margin-penalized
//! logit `psi`, scales by `s`, and feeds the result through softmax
//! cross-entropy — optionally weighted (class-balanced, CB) or shifted by
//! log-priors (balanced softmax, BS).
//!
//! The difficulty-aware balancing margin (DBM) composes two parts:
//!
//! - a class margin `m_c = k * ratio^(-tau)`, where `ratio` is the class
//!   count over the rarest count, so rare classes get the largest margin;
//! - an instance margin `m_i = m_c * (1 - cos_y) / 2`, largest for samples
//!   the model currently gets badly wrong, applied to all positives or only
//!   to *hard* ones (those beaten by some other class's cosine).
//!
//! The penalized logit is `psi = cos(theta_y + m_c [+ m_i])`; if the shifted
//! angle passes `pi` the logit saturates at `-1` with zero slope. Classic
//! baselines (SphereFace, CosFace, ArcFace, LDAM) are provided for
//! comparison. All losses return analytic gradients with respect to the raw
//! cosines so the model layer can backpropagate through them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, safe_acos};

/// Class frequencies of a training set with the derived quantities every
/// loss needs: proportions for BS shifts, count ratios for DBM margins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassPrior {
    counts: Vec<usize>,
    proportions: Vec<f64>,
    ratios: Vec<f64>,
    log_proportions: Vec<f64>,
    min_count: usize,
}

impl ClassPrior {
    /// Builds a prior from per-class sample counts; every class must occur
    /// at least once.
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("class prior needs at least one class"));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("class {c} has zero samples")));
        }
        let total: usize = counts.iter().sum();
        let min_count = *counts.iter().min().expect("non-empty");
        let proportions: Vec<f64> = counts
            .iter()
            .map(|&n| n as f64 / total as f64)
            .collect();
        let ratios = counts.iter().map(|&n| n as f64 / min_count as f64).collect();
        let log_proportions = proportions.iter().map(|p| p.ln()).collect();
        Ok(ClassPrior {
            counts,
            proportions,
            ratios,
            log_proportions,
            min_count,
        })
    }

    /// Counts the labels of a training set. Every class in `0..classes`
    /// must be present.
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        let mut counts = vec![0usize; classes];
        for &y in labels {
            if y >= classes {
                return Err(Error::IndexOutOfRange {
                    index: y,
                    len: classes,
                });
            }
            counts[y] += 1;
        }
        ClassPrior::new(counts)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts[class]
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// `n_class / n_rarest`, always >= 1.
    pub fn ratio(&self, class: usize) -> f64 {
        self.ratios[class]
    }

    pub fn proportion(&self, class: usize) -> f64 {
        self.proportions[class]
    }

    pub fn log_proportions(&self) -> &[f64] {
        &self.log_proportions
    }
}

/// Which samples receive the instance-difficulty part of the DBM margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginMode {
    /// No margin at all; the loss reduces exactly to its base form.
    None,
    /// Class margin only, no instance term.
    ClassOnly,
    /// Class margin plus instance margin on every sample.
    AllPositives,
    /// Class margin always; instance margin only when some other class's
    /// cosine ties or beats the true class (a "hard positive").
    HardPositives,
}

/// How the margin is treated during backpropagation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// The margin value is frozen at its forward value: the gradient sees
    /// `psi = cos(theta + M)` with constant `M`. This is the default.
    #[default]
    Detached,
    /// The instance margin's dependence on `cos_y` is differentiated too.
    /// The hard/easy indicator stays frozen either way.
    Through,
}

/// Configuration of the DBM margin together with the logit scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    /// Margin strength `k`; the rarest class gets exactly this margin.
    pub k: f64,
    /// Imbalance exponent `tau`; larger values concentrate the margin on
    /// rare classes more aggressively.
    pub tau: f64,
    /// Logit scale `s` applied to every cosine before softmax.
    pub scale: f64,
    pub mode: MarginMode,
    pub gradient: GradientMode,
}

impl MarginConfig {
    pub const DEFAULT_SCALE: f64 = 32.0;

    /// The recommended default margin: `k = 0.1`, `tau = 1`, hard positives only,
    /// detached gradient, scale 32.
    pub fn default_dbm() -> Self {
        MarginConfig {
            k: 0.1,
            tau: 1.0,
            scale: Self::DEFAULT_SCALE,
            mode: MarginMode::HardPositives,
            gradient: GradientMode::Detached,
        }
    }

    /// No margin: the loss is exactly the base cross-entropy variant.
    pub fn disabled() -> Self {
        MarginConfig {
            k: 0.0,
            tau: 1.0,
            scale: Self::DEFAULT_SCALE,
            mode: MarginMode::None,
            gradient: GradientMode::Detached,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k.is_finite() && self.k >= 0.0) {
            return Err(Error::invalid(format!(
                "margin strength k must be finite and >= 0, got {}",
                self.k
            )));
        }
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::invalid(format!(
                "margin exponent tau must be finite and >= 0, got {}",
                self.tau
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::invalid(format!(
                "logit scale must be finite and > 0, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// The classic additive/multiplicative margins, for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaselineMargin {
    /// `psi = cos(m * theta)` with integer `m`.
    SphereFace { m: u32 },
    /// `psi = cos(theta) - m`.
    CosFace { m: f64 },
    /// `psi = cos(theta + m)`.
    ArcFace { m: f64 },
    /// `psi = cos(theta) - m * n_y^(-1/4)`: a count-adaptive CosFace.
    Ldam { m: f64 },
}

impl BaselineMargin {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineMargin::SphereFace { m } => {
                if m < 1 {
                    return Err(Error::invalid("sphereface multiplier must be >= 1"));
                }
            }
            BaselineMargin::CosFace { m }
            | BaselineMargin::ArcFace { m }
            | BaselineMargin::Ldam { m } => {
                if !(m.is_finite() && m >= 0.0) {
                    return Err(Error::invalid(format!(
                        "margin must be finite and >= 0, got {m}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A margin-penalized positive logit, its slope with respect to the raw
/// cosine, and bookkeeping flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveLogit {
    /// The penalized cosine `psi` that replaces `cos_y`.
    pub psi: f64,
    /// `d psi / d cos_y` under the configured gradient mode.
    pub dpsi_dcos: f64,
    /// Whether the sample was a hard positive (some negative cosine tied or
    /// beat the true class). Always `false` when no indicator was evaluated.
    pub hard_positive: bool,
    /// Whether the shifted angle passed `pi` and the logit saturated at -1.
    pub clamped: bool,
}

impl PositiveLogit {
    /// The no-op margin: `psi = cos_y` with unit slope.
    pub fn identity(cos_y: f64) -> Self {
        PositiveLogit {
            psi: cos_y,
            dpsi_dcos: 1.0,
            hard_positive: false,
            clamped: false,
        }
    }
}

/// A per-sample loss value with its gradient in raw-cosine space.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub loss: f64,
    /// `d loss / d cos_i` for every class `i`.
    pub grad_cos: Vec<f64>,
    pub hard_positive: bool,
    pub margin_clamped: bool,
}

/// Per-class DBM margins `k * ratio^(-tau)`. The rarest class has ratio 1
/// and therefore margin exactly `k`; rarer means larger.
pub fn class_margins(prior: &ClassPrior, k: f64, tau: f64) -> Vec<f64> {
    (0..prior.classes())
        .map(|c| k * prior.ratio(c).powf(-tau))
        .collect()
}

/// Instance difficulty `(1 - cos_y) / 2`: 0 when the feature sits on the
/// class weight, 1 when it points the opposite way.
pub fn instance_difficulty(cos_y: f64) -> f64 {
    (1.0 - cos_y.clamp(-1.0, 1.0)) / 2.0
}

/// Instance margin: the class margin scaled by the sample's difficulty.
pub fn instance_margin(class_margin: f64, difficulty: f64) -> f64 {
    class_margin * difficulty
}

/// Effective weight of the class-balanced loss: `(1 - beta) / (1 - beta^n)`.
/// `beta = 0` recovers uniform weighting (weight 1 for every class).
pub fn cb_weight(beta: f64, n: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid(format!(
            "class-balance beta must lie in [0, 1), got {beta}"
        )));
    }
    if n == 0 {
        return Err(Error::invalid("class-balance weight needs n >= 1"));
    }
    Ok((1.0 - beta) / (1.0 - beta.powf(n as f64)))
}

/// True when some other class's cosine ties or beats the true class's: the
/// sample would be misclassified (or is on the decision boundary) by the
/// raw cosines. Ties count as hard. A single-class problem is never hard.
pub fn is_hard_positive(cos: &[f64], y: usize) -> bool {
    let cos_y = cos[y];
    cos.iter()
        .enumerate()
        .any(|(i, &c)| i != y && c >= cos_y)
}

/// Shifts `cos_y` by the DBM margin. Looks at the whole cosine vector
/// because hardness is decided against the negatives.
pub fn dbm_positive_logit(
    cos: &[f64],
    y: usize,
    prior: &ClassPrior,
    cfg: &MarginConfig,
) -> Result<PositiveLogit> {
    if y >= cos.len() {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: cos.len(),
        });
    }
    if cos.len() != prior.classes() {
        return Err(Error::shape(
            format!("{} cosines (one per class)", prior.classes()),
            format!("{}", cos.len()),
        ));
    }
    cfg.validate()?;
    let cos_y = cos[y];
    if cfg.mode == MarginMode::None {
        return Ok(PositiveLogit::identity(cos_y));
    }

    let m_c = cfg.k * prior.ratio(y).powf(-cfg.tau);
    let hard = is_hard_positive(cos, y);
    // Whether the instance term is actually applied to *this* sample.
    let instance_applied = match cfg.mode {
        MarginMode::None | MarginMode::ClassOnly => false,
        MarginMode::AllPositives => true,
        MarginMode::HardPositives => hard,
    };
    let m_i = if instance_applied {
        instance_margin(m_c, instance_difficulty(cos_y))
    } else {
        0.0
    };
    let total = m_c + m_i;
    if total == 0.0 {
        // Exact short-circuit (k = 0): bit-for-bit identical to the base
        // loss, which the reduction identities rely on.
        return Ok(PositiveLogit {
            hard_positive: hard,
            ..PositiveLogit::identity(cos_y)
        });
    }

    let theta = safe_acos(cos_y);
    if theta + total > std::f64::consts::PI {
        return Ok(PositiveLogit {
            psi: -1.0,
            dpsi_dcos: 0.0,
            hard_positive: hard,
            clamped: true,
        });
    }
    let shifted = theta + total;
    let psi = shifted.cos();
    let sin_theta = theta.sin(); // > 0 thanks to the acos clamp
    let dpsi_dcos = match cfg.gradient {
        GradientMode::Detached => shifted.sin() / sin_theta,
        GradientMode::Through => {
            // total(c) = m_c + a * m_c * (1 - c)/2, so d total/dc = -a*m_c/2
            let a = if instance_applied { 1.0 } else { 0.0 };
            shifted.sin() * (1.0 / sin_theta + a * m_c / 2.0)
        }
    };
    Ok(PositiveLogit {
        psi,
        dpsi_dcos,
        hard_positive: hard,
        clamped: false,
    })
}

/// The classic margins' positive logits. These depend only on the true
/// class's cosine (and, for LDAM, its count), never on the negatives.
pub fn baseline_positive_logit(
    spec: &BaselineMargin,
    cos_y: f64,
    n_y: usize,
) -> Result<PositiveLogit> {
    spec.validate()?;
    let out = match *spec {
        BaselineMargin::SphereFace { m } => {
            let m = f64::from(m);
            let theta = safe_acos(cos_y);
            PositiveLogit {
                psi: (m * theta).cos(),
                dpsi_dcos: m * (m * theta).sin() / theta.sin(),
                hard_positive: false,
                clamped: false,
            }
        }
        BaselineMargin::CosFace { m } => PositiveLogit {
            psi: cos_y - m,
            dpsi_dcos: 1.0,
            hard_positive: false,
            clamped: false,
        },
        BaselineMargin::ArcFace { m } => {
            if m == 0.0 {
                PositiveLogit::identity(cos_y)
            } else {
                let theta = safe_acos(cos_y);
                if theta + m > std::f64::consts::PI {
                    PositiveLogit {
                        psi: -1.0,
                        dpsi_dcos: 0.0,
                        hard_positive: false,
                        clamped: true,
                    }
                } else {
                    PositiveLogit {
                        psi: (theta + m).cos(),
                        dpsi_dcos: (theta + m).sin() / theta.sin(),
                        hard_positive: false,
                        clamped: false,
                    }
                }
            }
        }
        BaselineMargin::Ldam { m } => {
            if n_y == 0 {
                return Err(Error::invalid("ldam needs a positive class count"));
            }
            let shift = m * (n_y as f64).powf(-0.25);
            if shift == 0.0 {
                PositiveLogit::identity(cos_y)
            } else {
                PositiveLogit {
                    psi: cos_y - shift,
                    dpsi_dcos: 1.0,
                    hard_positive: false,
                    clamped: false,
                }
            }
        }
    };
    Ok(out)
}

/// Shared core: scale the cosines, swap in the penalized positive logit,
/// optionally shift every logit (balanced softmax), weight the sample, and
/// take softmax cross-entropy. Returns the loss and its gradient in
/// raw-cosine space.
fn margin_ce_core(
    pos: &PositiveLogit,
    cos: &[f64],
    y: usize,
    scale: f64,
    shift: Option<&[f64]>,
    weight: f64,
) -> Result<LossResult> {
    if y >= cos.len() {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: cos.len(),
        });
    }
    if let Some(sh) = shift {
        if sh.len() != cos.len() {
            return Err(Error::shape(
                format!("{} logit shifts", cos.len()),
                format!("{}", sh.len()),
            ));
        }
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::invalid(format!(
            "logit scale must be finite and > 0, got {scale}"
        )));
    }
    if !(weight.is_finite() && weight > 0.0) {
        return Err(Error::invalid(format!(
            "sample weight must be finite and > 0, got {weight}"
        )));
    }

    let mut z: Vec<f64> = cos.iter().map(|&c| c * scale).collect();
    z[y] = pos.psi * scale;
    if let Some(sh) = shift {
        for (zi, &s) in z.iter_mut().zip(sh) {
            *zi += s;
        }
    }
    let lse = log_sum_exp(&z);
    let loss = weight * (lse - z[y]);

    let mut grad_cos: Vec<f64> = z.iter().map(|&zi| weight * scale * (zi - lse).exp()).collect();
    let p_y = (z[y] - lse).exp();
    grad_cos[y] = weight * scale * (p_y - 1.0) * pos.dpsi_dcos;

    Ok(LossResult {
        loss,
        grad_cos,
        hard_positive: pos.hard_positive,
        margin_clamped: pos.clamped,
    })
}

/// Cross-entropy over scaled cosines with an arbitrary penalized positive
/// logit: the plain-CE composition used by every margin variant.
pub fn margin_cross_entropy(
    pos: &PositiveLogit,
    cos: &[f64],
    y: usize,
    scale: f64,
) -> Result<LossResult> {
    margin_ce_core(pos, cos, y, scale, None, 1.0)
}

/// Like [`margin_cross_entropy`] but with a per-class additive logit shift
/// (the balanced-softmax composition uses `shift = log proportions`).
pub fn margin_cross_entropy_shifted(
    pos: &PositiveLogit,
    cos: &[f64],
    y: usize,
    scale: f64,
    shift: &[f64],
) -> Result<LossResult> {
    margin_ce_core(pos, cos, y, scale, Some(shift), 1.0)
}

/// The base cross-entropy variant a margin composes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseLoss {
    /// Plain softmax cross-entropy.
    Ce,
    /// Class-balanced: samples weighted by effective number of samples.
    Cb,
    /// Balanced softmax: logits shifted by log class proportions.
    Bs,
}

/// Full specification of one member of the loss family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub base: BaseLoss,
    /// Beta for [`BaseLoss::Cb`] (ignored otherwise).
    pub cb_beta: f64,
    pub margin: MarginConfig,
    /// When set, replaces the DBM margin with a classic one; the DBM margin
    /// mode must then be `None`.
    pub baseline: Option<BaselineMargin>,
}

pub const DEFAULT_CB_BETA: f64 = 0.9999;

impl LossSpec {
    /// A margin-free base loss at the default scale.
    pub fn plain(base: BaseLoss) -> Self {
        LossSpec {
            base,
            cb_beta: DEFAULT_CB_BETA,
            margin: MarginConfig::disabled(),
            baseline: None,
        }
    }

    /// DBM margin composed with the given base.
    pub fn dbm(base: BaseLoss, margin: MarginConfig) -> Self {
        LossSpec {
            base,
            cb_beta: DEFAULT_CB_BETA,
            margin,
            baseline: None,
        }
    }

    /// A classic margin composed with plain cross-entropy.
    pub fn classic(baseline: BaselineMargin) -> Self {
        LossSpec {
            base: BaseLoss::Ce,
            cb_beta: DEFAULT_CB_BETA,
            margin: MarginConfig::disabled(),
            baseline: Some(baseline),
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.margin.scale = scale;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.cb_beta = beta;
        self
    }

    pub fn scale(&self) -> f64 {
        self.margin.scale
    }

    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        if let Some(b) = &self.baseline {
            b.validate()?;
            if self.margin.mode != MarginMode::None {
                return Err(Error::invalid(
                    "a classic margin and the DBM margin cannot be combined; \
                     set the margin mode to none",
                ));
            }
        }
        if self.base == BaseLoss::Cb && !(0.0..1.0).contains(&self.cb_beta) {
            return Err(Error::invalid(format!(
                "class-balance beta must lie in [0, 1), got {}",
                self.cb_beta
            )));
        }
        Ok(())
    }

    /// Whether any margin (DBM or classic) is active.
    pub fn has_margin(&self) -> bool {
        self.baseline.is_some() || self.margin.mode != MarginMode::None
    }
}

/// Evaluates one sample of the loss family on raw cosines.
pub fn cosine_loss(
    cos: &[f64],
    y: usize,
    prior: &ClassPrior,
    spec: &LossSpec,
) -> Result<LossResult> {
    spec.validate()?;
    if cos.len() != prior.classes() {
        return Err(Error::shape(
            format!("{} cosines (one per class)", prior.classes()),
            format!("{}", cos.len()),
        ));
    }
    if y >= cos.len() {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: cos.len(),
        });
    }
    let pos = match &spec.baseline {
        Some(b) => baseline_positive_logit(b, cos[y], prior.count(y))?,
        None => dbm_positive_logit(cos, y, prior, &spec.margin)?,
    };
    let weight = match spec.base {
        BaseLoss::Cb => cb_weight(spec.cb_beta, prior.count(y))?,
        _ => 1.0,
    };
    let shift = match spec.base {
        BaseLoss::Bs => Some(prior.log_proportions()),
        _ => None,
    };
    margin_ce_core(&pos, cos, y, spec.scale(), shift, weight)
}

/// Plain cross-entropy on scaled cosines (no margin).
pub fn ce_loss(cos: &[f64], y: usize, prior: &ClassPrior, scale: f64) -> Result<LossResult> {
    cosine_loss(cos, y, prior, &LossSpec::plain(BaseLoss::Ce).with_scale(scale))
}

/// Class-balanced cross-entropy on scaled cosines (no margin).
pub fn cb_loss(
    cos: &[f64],
    y: usize,
    prior: &ClassPrior,
    scale: f64,
    beta: f64,
) -> Result<LossResult> {
    cosine_loss(
        cos,
        y,
        prior,
        &LossSpec::plain(BaseLoss::Cb).with_scale(scale).with_beta(beta),
    )
}

/// Balanced-softmax cross-entropy on scaled cosines (no margin).
pub fn bs_loss(cos: &[f64], y: usize, prior: &ClassPrior, scale: f64) -> Result<LossResult> {
    cosine_loss(cos, y, prior, &LossSpec::plain(BaseLoss::Bs).with_scale(scale))
}

/// DBM margin with plain cross-entropy.
pub fn dbm_ce_loss(
    cos: &[f64],
    y: usize,
    prior: &ClassPrior,
    cfg: &MarginConfig,
) -> Result<LossResult> {
    cosine_loss(cos, y, prior, &LossSpec::dbm(BaseLoss::Ce, *cfg))
}

/// DBM margin with the class-balanced weighting folded in.
pub fn dbm_cb_loss(
    cos: &[f64],
    y: usize,
    prior: &ClassPrior,
    cfg: &MarginConfig,
    beta: f64,
) -> Result<LossResult> {
    cosine_loss(
        cos,
        y,
        prior,
        &LossSpec::dbm(BaseLoss::Cb, *cfg).with_beta(beta),
    )
}

/// DBM margin with the balanced-softmax shift folded in.
pub fn dbm_bs_loss(
    cos: &[f64],
    y: usize,
    prior: &ClassPrior,
    cfg: &MarginConfig,
) -> Result<LossResult> {
    cosine_loss(cos, y, prior, &LossSpec::dbm(BaseLoss::Bs, *cfg))
}

/// Cross-entropy variants on arbitrary (already-scaled, e.g. affine-head)
/// logits: no margins, no cosine geometry. `base = Bs` shifts by log
/// proportions; `base = Cb` weights by effective number.
pub fn logit_loss(
    logits: &[f64],
    y: usize,
    prior: &ClassPrior,
    base: BaseLoss,
    cb_beta: f64,
) -> Result<LossResult> {
    if logits.len() != prior.classes() {
        return Err(Error::shape(
            format!("{} logits (one per class)", prior.classes()),
            format!("{}", logits.len()),
        ));
    }
    if y >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: logits.len(),
        });
    }
    let weight = match base {
        BaseLoss::Cb => cb_weight(cb_beta, prior.count(y))?,
        _ => 1.0,
    };
    let mut z = logits.to_vec();
    if base == BaseLoss::Bs {
        for (zi, &s) in z.iter_mut().zip(prior.log_proportions()) {
            *zi += s;
        }
    }
    let lse = log_sum_exp(&z);
    let loss = weight * (lse - z[y]);
    let mut grad: Vec<f64> = z.iter().map(|&zi| weight * (zi - lse).exp()).collect();
    grad[y] -= weight;
    Ok(LossResult {
        loss,
        grad_cos: grad,
        hard_positive: false,
        margin_clamped: false,
    })
}
