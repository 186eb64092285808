//! A small fully-connected network with a linear or cosine classifier head.
//!
//! Layers compute `a = tanh(x W + b)` except the final projection into
//! feature space, which stays linear so the feature geometry is unbounded.
//! The cosine head L2-normalizes both the feature and each class row and
//! scores by their dot product (a raw cosine in `[-1, 1]`); the linear head
//! is an ordinary affine map. Forward and backward passes are written by
//! hand — the backward pass is checked against finite differences in the
//! gradcheck module and tests.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CosineHead, ZERO_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Linear,
    Cosine,
}

/// Architecture of the network: layer widths plus the head flavor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: usize,
    /// Hidden tanh widths; may be empty for a single linear projection.
    pub hidden: Vec<usize>,
    /// Feature dimension the head operates on.
    pub feature: usize,
    pub classes: usize,
    pub head: HeadKind,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.feature == 0 || self.classes == 0 {
            return Err(Error::invalid(
                "input, feature, and class dimensions must all be positive",
            ));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }

    /// Widths of the trunk as (fan_in, fan_out) pairs, last pair linear.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input);
        widths.extend_from_slice(&self.hidden);
        widths.push(self.feature);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One dense layer; `weight` is `(fan_in, fan_out)` so a batch multiplies
/// on the left. Doubles as the gradient container for that layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Head parameters; `weight` rows are class prototypes `(classes, feature)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HeadParams {
    Linear {
        weight: Array2<f64>,
        bias: Array1<f64>,
    },
    Cosine {
        weight: Array2<f64>,
    },
}

/// All trainable parameters. The same structure serves as the gradient and
/// momentum buffer (`zeros_like`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub layers: Vec<DenseLayer>,
    pub head: HeadParams,
}

/// Draws initial parameters: trunk weights `N(0, 1/sqrt(fan_in))` with zero
/// biases; cosine head rows drawn Gaussian then normalized to unit length;
/// linear head initialized like a trunk layer. Deterministic in `seed`.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut draw = |rows: usize, cols: usize, sigma: f64| -> Array2<f64> {
        let mut w = Array2::zeros((rows, cols));
        for x in w.iter_mut() {
            let z: f64 = normal.sample(&mut rng);
            *x = sigma * z;
        }
        w
    };

    let layers: Vec<DenseLayer> = spec
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| DenseLayer {
            weight: draw(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
            bias: Array1::zeros(fan_out),
        })
        .collect();

    let head = match spec.head {
        HeadKind::Linear => HeadParams::Linear {
            weight: draw(spec.classes, spec.feature, 1.0 / (spec.feature as f64).sqrt()),
            bias: Array1::zeros(spec.classes),
        },
        HeadKind::Cosine => {
            let mut weight = draw(spec.classes, spec.feature, 1.0);
            for mut row in weight.rows_mut() {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(ZERO_NORM_EPS);
                row.mapv_inplace(|x| x / norm);
            }
            HeadParams::Cosine { weight }
        }
    };

    Ok(ModelParams {
        spec: spec.clone(),
        layers,
        head,
    })
}

impl ModelParams {
    /// A same-shaped parameter set filled with zeros (gradient/velocity
    /// buffers).
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
            head: match &self.head {
                HeadParams::Linear { weight, bias } => HeadParams::Linear {
                    weight: Array2::zeros(weight.dim()),
                    bias: Array1::zeros(bias.len()),
                },
                HeadParams::Cosine { weight } => HeadParams::Cosine {
                    weight: Array2::zeros(weight.dim()),
                },
            },
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let trunk: usize = self
            .layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum();
        trunk
            + match &self.head {
                HeadParams::Linear { weight, bias } => weight.len() + bias.len(),
                HeadParams::Cosine { weight } => weight.len(),
            }
    }

    /// Flat views of every parameter block, in a fixed order (trunk weights
    /// and biases layer by layer, then the head).
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("row-major"));
            out.push(l.bias.as_slice().expect("contiguous"));
        }
        match &self.head {
            HeadParams::Linear { weight, bias } => {
                out.push(weight.as_slice().expect("row-major"));
                out.push(bias.as_slice().expect("contiguous"));
            }
            HeadParams::Cosine { weight } => out.push(weight.as_slice().expect("row-major")),
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("row-major"));
            out.push(l.bias.as_slice_mut().expect("contiguous"));
        }
        match &mut self.head {
            HeadParams::Linear { weight, bias } => {
                out.push(weight.as_slice_mut().expect("row-major"));
                out.push(bias.as_slice_mut().expect("contiguous"));
            }
            HeadParams::Cosine { weight } => out.push(weight.as_slice_mut().expect("row-major")),
        }
        out
    }

    /// Reads parameter `i` in flat order. Panics when out of range; meant
    /// for finite-difference probes, not hot loops.
    pub fn get_param(&self, mut i: usize) -> f64 {
        for s in self.param_slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut i: usize, value: f64) {
        for s in self.param_slices_mut() {
            if i < s.len() {
                s[i] = value;
                return;
            }
            i -= s.len();
        }
        panic!("parameter index out of range");
    }

    /// Borrows the head as a [`CosineHead`] scorer with the given scale.
    /// Errors when the head is linear.
    pub fn cosine_head(&self, scale: f64) -> Result<CosineHead> {
        match &self.head {
            HeadParams::Cosine { weight } => CosineHead::new(weight.clone(), scale),
            HeadParams::Linear { .. } => Err(Error::invalid(
                "model has a linear head; cosine geometry is undefined",
            )),
        }
    }
}

/// Cosine-head intermediates kept for the backward pass.
#[derive(Debug, Clone)]
struct CosineCache {
    feat_hat: Array2<f64>,
    feat_norms: Array1<f64>,
    w_hat: Array2<f64>,
    w_norms: Array1<f64>,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[k]` feeds layer `k`; the last entry is the feature batch.
    inputs: Vec<Array2<f64>>,
    cosine: Option<CosineCache>,
    scores: Array2<f64>,
}

impl ForwardCache {
    /// Feature-space activations, one row per sample.
    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.inputs.last().expect("non-empty").view()
    }

    /// Head scores: raw cosines for a cosine head (unscaled), affine logits
    /// for a linear head.
    pub fn scores(&self) -> ArrayView2<'_, f64> {
        self.scores.view()
    }

    pub fn batch_len(&self) -> usize {
        self.scores.nrows()
    }
}

/// Runs the network on a batch (one sample per row).
pub fn forward(model: &ModelParams, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
    if x.ncols() != model.spec.input {
        return Err(Error::shape(
            format!("batch width {}", model.spec.input),
            format!("{}", x.ncols()),
        ));
    }
    if x.nrows() == 0 {
        return Err(Error::invalid("cannot run a forward pass on an empty batch"));
    }

    let n_layers = model.layers.len();
    let mut inputs: Vec<Array2<f64>> = Vec::with_capacity(n_layers + 1);
    inputs.push(x.to_owned());
    for (k, layer) in model.layers.iter().enumerate() {
        let pre = inputs[k].dot(&layer.weight) + &layer.bias;
        let out = if k + 1 < n_layers {
            pre.mapv(f64::tanh)
        } else {
            pre // final projection stays linear
        };
        inputs.push(out);
    }
    let features = inputs.last().expect("non-empty");

    let (scores, cosine) = match &model.head {
        HeadParams::Linear { weight, bias } => {
            (features.dot(&weight.t()) + bias, None)
        }
        HeadParams::Cosine { weight } => {
            let feat_norms = row_norms(features.view());
            if let Some(i) = feat_norms.iter().position(|&n| n < ZERO_NORM_EPS) {
                return Err(Error::ZeroVector { norm: feat_norms[i] });
            }
            let w_norms = row_norms(weight.view());
            if let Some(i) = w_norms.iter().position(|&n| n < ZERO_NORM_EPS) {
                return Err(Error::invalid(format!(
                    "cosine head row {i} collapsed to zero norm"
                )));
            }
            let feat_hat = divide_rows(features.view(), &feat_norms);
            let w_hat = divide_rows(weight.view(), &w_norms);
            let mut cos = feat_hat.dot(&w_hat.t());
            cos.mapv_inplace(|c| c.clamp(-1.0, 1.0));
            (
                cos,
                Some(CosineCache {
                    feat_hat,
                    feat_norms,
                    w_hat,
                    w_norms,
                }),
            )
        }
    };

    Ok(ForwardCache {
        inputs,
        cosine,
        scores,
    })
}

/// Backpropagates `d loss / d scores` through head and trunk, returning
/// gradients shaped exactly like the parameters.
pub fn backward(
    model: &ModelParams,
    cache: &ForwardCache,
    dscores: ArrayView2<'_, f64>,
) -> Result<ModelParams> {
    // A cache from a different architecture is a programming error we can
    // detect cheaply; better than silently wrong gradients.
    if cache.inputs.len() != model.layers.len() + 1
        || cache.scores.ncols() != model.spec.classes
        || matches!(model.head, HeadParams::Cosine { .. }) != cache.cosine.is_some()
        || cache
            .inputs
            .iter()
            .zip(&model.layers)
            .any(|(a, l)| a.ncols() != l.weight.nrows())
        || cache.features().ncols() != model.spec.feature
    {
        return Err(Error::StaleCache);
    }
    if dscores.dim() != cache.scores.dim() {
        return Err(Error::shape(
            format!("{:?}", cache.scores.dim()),
            format!("{:?}", dscores.dim()),
        ));
    }

    let mut grads = model.zeros_like();
    let features = cache.features();

    // Head.
    let mut delta: Array2<f64>; // d loss / d features
    match (&model.head, &mut grads.head) {
        (
            HeadParams::Linear { weight, .. },
            HeadParams::Linear {
                weight: gw,
                bias: gb,
            },
        ) => {
            *gw = dscores.t().dot(&features);
            *gb = dscores.sum_axis(Axis(0));
            delta = dscores.dot(weight);
        }
        (HeadParams::Cosine { .. }, HeadParams::Cosine { weight: gw }) => {
            let cc = cache.cosine.as_ref().expect("checked above");
            // Through the dot products.
            let d_feat_hat = dscores.dot(&cc.w_hat);
            let d_w_hat = dscores.t().dot(&cc.feat_hat);
            // Through each row normalization: for u_hat = u/|u|,
            // du = (du_hat - (du_hat . u_hat) u_hat) / |u|.
            delta = normalize_backward(&d_feat_hat, &cc.feat_hat, &cc.feat_norms);
            *gw = normalize_backward(&d_w_hat, &cc.w_hat, &cc.w_norms);
        }
        _ => unreachable!("zeros_like mirrors the head variant"),
    }

    // Trunk, in reverse. Layer k's post-activation is inputs[k + 1].
    let n_layers = model.layers.len();
    for k in (0..n_layers).rev() {
        let dpre = if k + 1 < n_layers {
            let a = &cache.inputs[k + 1];
            let mut d = delta;
            d.zip_mut_with(a, |g, &act| *g *= 1.0 - act * act);
            d
        } else {
            delta // final projection is linear
        };
        grads.layers[k].weight = cache.inputs[k].t().dot(&dpre);
        grads.layers[k].bias = dpre.sum_axis(Axis(0));
        delta = dpre.dot(&model.layers[k].weight.t());
    }

    Ok(grads)
}

/// One SGD-with-momentum step:
/// `v <- momentum * v - lr * (g + weight_decay * p)`, then `p <- p + v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    velocity: &mut ModelParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let gs = grads.param_slices();
    let mut vs = velocity.param_slices_mut();
    let mut ps = params.param_slices_mut();
    debug_assert_eq!(gs.len(), ps.len());
    for ((p, g), v) in ps.iter_mut().zip(gs.iter()).zip(vs.iter_mut()) {
        for i in 0..p.len() {
            v[i] = momentum * v[i] - lr * (g[i] + weight_decay * p[i]);
            p[i] += v[i];
        }
    }
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Class predictions for a batch: argmax of the head scores.
pub fn predict(model: &ModelParams, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let cache = forward(model, x)?;
    Ok(cache
        .scores
        .rows()
        .into_iter()
        .map(|r| argmax(r))
        .collect())
}

fn row_norms(m: ArrayView2<'_, f64>) -> Array1<f64> {
    m.rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

fn divide_rows(m: ArrayView2<'_, f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        row.mapv_inplace(|x| x / n);
    }
    out
}

/// Backward through per-row L2 normalization.
fn normalize_backward(
    d_hat: &Array2<f64>,
    hat: &Array2<f64>,
    norms: &Array1<f64>,
) -> Array2<f64> {
    let mut out = d_hat.clone();
    for ((mut row, hat_row), &n) in out
        .rows_mut()
        .into_iter()
        .zip(hat.rows())
        .zip(norms.iter())
    {
        let proj: f64 = row.iter().zip(hat_row.iter()).map(|(a, b)| a * b).sum();
        for (o, &h) in row.iter_mut().zip(hat_row.iter()) {
            *o = (*o - proj * h) / n;
        }
    }
    out
}
