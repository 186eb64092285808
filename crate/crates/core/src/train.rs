//! Minibatch SGD with momentum, linear warmup followed by cosine annealing,
//! and optional deferred re-weighting (DRW).
//!
//! Sample weights are applied *outside* the per-sample loss: a batch
//! contributes `sum(w * loss) / sum(w)`. Class-balanced training (base
//! `cb`, or any run after its DRW switch epoch) sets `w` to the effective-
//! number weight of the sample's class; everything else uses `w = 1`, which
//! makes the batch loss a plain mean. The per-sample losses the trainer
//! consumes are therefore always unweighted; the folded class-balanced
//! compositions in the loss module remain available for direct use.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{cb_weight, cosine_loss, logit_loss, BaseLoss, ClassPrior, LossSpec};
use crate::model::{
    backward, forward, predict, sgd_step, ForwardCache, HeadParams, ModelParams,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs of linear ramp from `lr0 / warmup_epochs` up to `lr0`.
    pub warmup_epochs: usize,
    /// When set, switch on class-balanced sample weights starting at this
    /// epoch (deferred re-weighting). Incompatible with base `cb`, which
    /// weights from the start.
    pub drw_epoch: Option<usize>,
    /// Effective-number beta used by the DRW weights.
    pub drw_beta: f64,
    pub loss: LossSpec,
    /// Seed for shuffling; independent of the model-init seed.
    pub seed: u64,
}

impl TrainConfig {
    /// The defaults used throughout: momentum 0.9, weight decay 2e-4,
    /// 5-epoch warmup, no DRW.
    pub fn default_with(loss: LossSpec) -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            warmup_epochs: 5,
            drw_epoch: None,
            drw_beta: 0.9999,
            loss,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("need at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be finite and > 0, got {}",
                self.lr0
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::invalid(format!(
                "warmup ({}) must be shorter than training ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if let Some(d) = self.drw_epoch {
            if d > self.epochs {
                return Err(Error::invalid(format!(
                    "drw epoch {d} lies beyond the {} training epochs",
                    self.epochs
                )));
            }
            if self.loss.base == BaseLoss::Cb {
                return Err(Error::invalid(
                    "deferred re-weighting is redundant with base `cb`, \
                     which weights from the start",
                ));
            }
            if !(0.0..1.0).contains(&self.drw_beta) {
                return Err(Error::invalid(format!(
                    "drw beta must lie in [0, 1), got {}",
                    self.drw_beta
                )));
            }
        }
        self.loss.validate()
    }
}

/// Learning rate at a given epoch: linear ramp over the warmup epochs, then
/// half-cosine decay from `lr0` toward zero across the remaining epochs.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.lr0 * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let span = (cfg.epochs - cfg.warmup_epochs) as f64;
    let t = ((epoch - cfg.warmup_epochs) as f64 / span).min(1.0);
    cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Per-epoch training diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Weighted mean of per-sample losses over the epoch.
    pub mean_loss: f64,
    /// Fraction of training samples flagged as hard positives.
    pub hard_fraction: f64,
    /// Fraction whose margin saturated past `pi`.
    pub clamped_fraction: f64,
    pub heldout_accuracy: Option<f64>,
}

/// One evaluated minibatch: normalized weighted loss, the score-space
/// gradient ready for [`backward`], and margin diagnostics.
pub struct BatchEval {
    pub loss: f64,
    pub dscores: Array2<f64>,
    pub cache: ForwardCache,
    pub hard_count: usize,
    pub clamped_count: usize,
}

/// Evaluates `sum(w * loss) / sum(w)` over a batch together with its
/// gradient with respect to the head scores. Works for both head kinds;
/// margins require the cosine head.
pub fn batch_loss(
    model: &ModelParams,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    prior: &ClassPrior,
    spec: &LossSpec,
    weights: &[f64],
) -> Result<BatchEval> {
    if labels.len() != x.nrows() || weights.len() != x.nrows() {
        return Err(Error::shape(
            format!("{} labels and weights", x.nrows()),
            format!("{} and {}", labels.len(), weights.len()),
        ));
    }
    let weight_sum: f64 = weights.iter().sum();
    if !(weight_sum.is_finite() && weight_sum > 0.0) {
        return Err(Error::invalid(format!(
            "batch weights must sum to a positive number, got {weight_sum}"
        )));
    }
    let linear_head = matches!(model.head, HeadParams::Linear { .. });
    if linear_head && spec.has_margin() {
        return Err(Error::invalid(
            "margins operate on cosines; use a cosine head or disable the margin",
        ));
    }

    let cache = forward(model, x)?;
    let scores = cache.scores();
    let mut dscores = Array2::zeros(scores.raw_dim());
    let mut loss_sum = 0.0;
    let mut hard_count = 0;
    let mut clamped_count = 0;
    for (n, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        let row = scores.row(n);
        let row = row.as_slice().expect("row-major scores");
        let out = if linear_head {
            logit_loss(row, y, prior, spec.base, spec.cb_beta)?
        } else {
            cosine_loss(row, y, prior, spec)?
        };
        loss_sum += w * out.loss;
        hard_count += usize::from(out.hard_positive);
        clamped_count += usize::from(out.margin_clamped);
        for (j, g) in out.grad_cos.iter().enumerate() {
            dscores[(n, j)] = w / weight_sum * g;
        }
    }

    Ok(BatchEval {
        loss: loss_sum / weight_sum,
        dscores,
        cache,
        hard_count,
        clamped_count,
    })
}

/// Fraction of positions where the two sequences agree.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            format!("{} predictions", labels.len()),
            format!("{}", predictions.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("cannot score an empty label set"));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Convenience: overall accuracy of a model on a dataset.
pub fn evaluate(model: &ModelParams, data: &LabeledDataset) -> Result<f64> {
    let preds = predict(model, data.features())?;
    accuracy(&preds, data.labels())
}

/// Trains `model` on `data`, returning the final parameters and one log row
/// per epoch. Fails fast with [`Error::NonFiniteLoss`] on divergence.
pub fn train(
    mut model: ModelParams,
    data: &LabeledDataset,
    heldout: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    cfg.validate()?;
    if data.dim() != model.spec.input || data.classes() != model.spec.classes {
        return Err(Error::shape(
            format!(
                "data with dim {} and {} classes",
                model.spec.input, model.spec.classes
            ),
            format!("dim {} and {} classes", data.dim(), data.classes()),
        ));
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if cfg.loss.has_margin() && matches!(model.head, HeadParams::Linear { .. }) {
        return Err(Error::invalid(
            "margins operate on cosines; use a cosine head or disable the margin",
        ));
    }
    let prior = data.prior()?;

    // Class-balanced weighting is applied externally (see module docs);
    // per-sample losses always see an unweighted base.
    let cb_from_start = cfg.loss.base == BaseLoss::Cb;
    let mut sample_spec = cfg.loss;
    if cb_from_start {
        sample_spec.base = BaseLoss::Ce;
    }
    let class_weight_beta = if cb_from_start {
        cfg.loss.cb_beta
    } else {
        cfg.drw_beta
    };
    let class_weights: Vec<f64> = prior
        .counts()
        .iter()
        .map(|&n| cb_weight(class_weight_beta, n))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = model.zeros_like();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let x = data.features();
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        order.shuffle(&mut rng);
        let weighted = cb_from_start || cfg.drw_epoch.is_some_and(|d| epoch >= d);

        let mut loss_num = 0.0;
        let mut weight_den = 0.0;
        let mut hard = 0usize;
        let mut clamped = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut bx = Array2::zeros((chunk.len(), data.dim()));
            let mut bys = Vec::with_capacity(chunk.len());
            let mut bw = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                bx.row_mut(r).assign(&x.row(i));
                let y = data.labels()[i];
                bys.push(y);
                bw.push(if weighted { class_weights[y] } else { 1.0 });
            }
            let eval = batch_loss(&model, bx.view(), &bys, &prior, &sample_spec, &bw)?;
            if !eval.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let batch_weight: f64 = bw.iter().sum();
            loss_num += eval.loss * batch_weight;
            weight_den += batch_weight;
            hard += eval.hard_count;
            clamped += eval.clamped_count;

            let grads = backward(&model, &eval.cache, eval.dscores.view())?;
            sgd_step(
                &mut model,
                &grads,
                &mut velocity,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
        }

        let heldout_accuracy = match heldout {
            Some(h) => Some(evaluate(&model, h)?),
            None => None,
        };
        logs.push(EpochLog {
            epoch,
            lr,
            mean_loss: loss_num / weight_den,
            hard_fraction: hard as f64 / data.len() as f64,
            clamped_fraction: clamped as f64 / data.len() as f64,
            heldout_accuracy,
        });
    }

    Ok((model, logs))
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model together with the configuration that produced it.
/// Serialized as JSON; `f64` round-trips bit-exactly through the shortest
/// decimal representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelParams,
    pub train: TrainConfig,
}

pub fn save_checkpoint(path: &Path, model: &ModelParams, cfg: &TrainConfig) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
        train: cfg.clone(),
    };
    let json = serde_json::to_string_pretty(&ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            0,
            format!("unsupported checkpoint version {}", ckpt.version),
        ));
    }
    Ok(ckpt)
}
