//! Numerical laboratory for margin-based losses on long-tailed classification.
//!
//! The centerpiece is the difficulty-aware balancing margin (DBM): an additive
//! angular margin whose class-wise part grows as a class gets rarer and whose
//! instance-wise part grows with how badly the sample is classified right now.
//! Around it this crate provides:
//!
//! - [`numerics`]: L2 normalization, cosine-similarity logits, stable
//!   softmax cross-entropy, clamped `acos`.
//! - [`losses`]: the DBM margin and its composition with plain, class-balanced,
//!   and balanced-softmax cross-entropy, plus the classic margin baselines
//!   (SphereFace, CosFace, ArcFace, LDAM). Every loss returns its analytic
//!   gradient with respect to the raw cosines.
//! - [`model`]: a small MLP with a linear or cosine classifier head, with
//!   hand-written forward and backward passes.
//! - [`train`]: minibatch SGD with momentum, warmup + cosine annealing, and
//!   optional deferred re-weighting.
//! - [`data`]: synthetic Gaussian-blob datasets with exponentially imbalanced
//!   class counts, and a deterministic on-disk format.
//! - [`analysis`]: shot-group accuracy, angular compactness statistics, and a
//!   Fisher-criterion class separability score.
//! - [`gradcheck`]: finite-difference verification of every analytic gradient
//!   against independently written reference formulas.
//!
//! All computation is `f64` and deterministic: the only randomness flows
//! through explicitly seeded ChaCha8 generators.

pub mod analysis;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, ErrorClass, Result};
