//! Shared numeric primitives: L2 normalization, cosine-similarity logits,
//! numerically stable softmax cross-entropy, and a clamped arccosine.
//!
//! Everything is plain `f64`. Functions here are pure and allocation-light;
//! the loss and model layers build on them.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vectors with a norm below this are treated as zero and rejected.
pub const ZERO_NORM_EPS: f64 = 1e-30;

/// `safe_acos` clamps its argument to `[-1 + ACOS_EPS, 1 - ACOS_EPS]` so the
/// derivative `1/sin(theta)` stays finite near the poles.
pub const ACOS_EPS: f64 = 1e-7;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scales `v` to unit Euclidean norm. Zero (or denormal-tiny) vectors are an
/// error rather than a silent NaN factory.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if norm < ZERO_NORM_EPS {
        return Err(Error::ZeroVector { norm });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Arccosine with the argument clamped away from the branch points, so that
/// results stay in the open interval `(0, pi)` and `sin(acos(x))` never
/// vanishes. Non-finite input still yields NaN.
pub fn safe_acos(x: f64) -> f64 {
    x.clamp(-1.0 + ACOS_EPS, 1.0 - ACOS_EPS).acos()
}

/// `log(sum(exp(z)))` computed against the running maximum, exact for a
/// single-element slice and overflow-free for logits like `1000`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m; // empty slice or -inf entries: the sum degenerates
    }
    let sum: f64 = z.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

/// Softmax probabilities of `z`; entries sum to 1 up to rounding.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|&x| (x - lse).exp()).collect()
}

/// Cross-entropy `-log softmax(z)[y]`, evaluated as `logsumexp(z) - z[y]`.
pub fn softmax_cross_entropy(z: &[f64], y: usize) -> Result<f64> {
    if y >= z.len() {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: z.len(),
        });
    }
    Ok(log_sum_exp(z) - z[y])
}

/// Gradient of [`softmax_cross_entropy`] with respect to `z`: `p - onehot(y)`.
pub fn softmax_cross_entropy_grad(z: &[f64], y: usize) -> Result<Vec<f64>> {
    if y >= z.len() {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: z.len(),
        });
    }
    let mut g = softmax(z);
    g[y] -= 1.0;
    Ok(g)
}

/// A classifier head that scores by scaled cosine similarity:
/// `score_i = scale * cos(angle(f, w_i))`.
///
/// Both the feature and each weight row are normalized explicitly at every
/// evaluation; rows are stored as given.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CosineHead {
    weights: Array2<f64>,
    scale: f64,
}

impl CosineHead {
    /// `weights` has one row per class. Every row must have a nonzero norm
    /// and `scale` must be a positive finite number.
    pub fn new(weights: Array2<f64>, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!(
                "cosine head scale must be positive and finite, got {scale}"
            )));
        }
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::shape(
                "a non-empty weight matrix",
                format!("{} x {}", weights.nrows(), weights.ncols()),
            ));
        }
        for (i, row) in weights.rows().into_iter().enumerate() {
            let norm = l2_norm(row.as_slice().expect("row-major storage"));
            if norm < ZERO_NORM_EPS {
                return Err(Error::invalid(format!(
                    "cosine head row {i} has zero norm"
                )));
            }
        }
        Ok(CosineHead { weights, scale })
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// Raw cosines `cos(angle(f, w_i))` for every class, each clamped to
    /// `[-1, 1]` to absorb rounding from the two normalizations.
    pub fn cosines(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.feature_dim() {
            return Err(Error::shape(
                format!("feature of length {}", self.feature_dim()),
                format!("length {}", f.len()),
            ));
        }
        let f_hat = l2_normalize(f)?;
        self.weights
            .rows()
            .into_iter()
            .map(|row| {
                let w_hat = l2_normalize(row.as_slice().expect("row-major storage"))?;
                Ok(dot(&f_hat, &w_hat).clamp(-1.0, 1.0))
            })
            .collect()
    }
}

/// Scaled cosine-similarity logits for one feature vector; every entry lies
/// in `[-scale, scale]`.
pub fn cosine_logits(f: &[f64], head: &CosineHead) -> Result<Vec<f64>> {
    Ok(head.cosines(f)?.into_iter().map(|c| c * head.scale).collect())
}

/// An affine classifier head `score = W f + b`, the no-normalization
/// counterpart of [`CosineHead`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearHead {
    weights: Array2<f64>,
    biases: Array1<f64>,
}

impl LinearHead {
    pub fn new(weights: Array2<f64>, biases: Array1<f64>) -> Result<Self> {
        if weights.nrows() != biases.len() {
            return Err(Error::shape(
                format!("{} biases", weights.nrows()),
                format!("{}", biases.len()),
            ));
        }
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::shape(
                "a non-empty weight matrix",
                format!("{} x {}", weights.nrows(), weights.ncols()),
            ));
        }
        Ok(LinearHead { weights, biases })
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn biases(&self) -> &Array1<f64> {
        &self.biases
    }
}

/// Affine logits `W f + b` for one feature vector.
pub fn linear_logits(f: &[f64], head: &LinearHead) -> Result<Vec<f64>> {
    if f.len() != head.feature_dim() {
        return Err(Error::shape(
            format!("feature of length {}", head.feature_dim()),
            format!("length {}", f.len()),
        ));
    }
    Ok(head
        .weights
        .rows()
        .into_iter()
        .zip(head.biases.iter())
        .map(|(row, b)| dot(row.as_slice().expect("row-major storage"), f) + b)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    const TIGHT: f64 = 1e-12;

    #[test]
    fn normalize_three_four_five() {
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < TIGHT);
        assert!((v[1] - 0.8).abs() < TIGHT);
        assert!((l2_norm(&v) - 1.0).abs() < TIGHT);
    }

    #[test]
    fn normalize_unit_vector_is_identity() {
        let v = l2_normalize(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn safe_acos_midpoint_and_poles() {
        assert!((safe_acos(0.0) - std::f64::consts::FRAC_PI_2).abs() < TIGHT);
        // Clamped at the poles: finite, strictly inside (0, pi).
        let near_zero = safe_acos(1.0);
        let near_pi = safe_acos(-1.0);
        assert!(near_zero > 0.0 && near_zero < 1e-3);
        assert!(near_pi < std::f64::consts::PI && near_pi > 3.14);
        // High-precision references for acos at the clamp bounds, which
        // are the doubles produced by `1.0 - 1e-7` (not the exact reals).
        assert!((near_zero - 4.47213599109041237073e-4).abs() < 1e-15);
        assert!((near_pi - 3.14114543999068419723).abs() < 1e-12);
        assert!(safe_acos(f64::NAN).is_nan());
    }

    #[test]
    fn cosine_logits_on_axes() {
        let head = CosineHead::new(array![[2.0, 0.0], [0.0, 0.5]], 32.0).unwrap();
        let z = cosine_logits(&[10.0, 0.0], &head).unwrap();
        assert!((z[0] - 32.0).abs() < TIGHT);
        assert!(z[1].abs() < TIGHT);
    }

    #[test]
    fn cosine_logits_forty_five_degrees() {
        let head = CosineHead::new(array![[1.0, 0.0]], 1.0).unwrap();
        let z = cosine_logits(&[1.0, 1.0], &head).unwrap();
        // cos(pi/4), 50-digit reference value.
        assert!((z[0] - 0.7071067811865475244).abs() < TIGHT);
    }

    #[test]
    fn cosine_logits_antipodal() {
        let head = CosineHead::new(array![[1.0, 0.0]], 8.0).unwrap();
        let z = cosine_logits(&[-3.0, 0.0], &head).unwrap();
        assert!((z[0] + 8.0).abs() < TIGHT);
    }

    #[test]
    fn cosine_head_rejects_bad_inputs() {
        assert!(CosineHead::new(array![[1.0, 0.0], [0.0, 0.0]], 32.0).is_err());
        assert!(CosineHead::new(array![[1.0, 0.0]], 0.0).is_err());
        assert!(CosineHead::new(array![[1.0, 0.0]], f64::NAN).is_err());
        let head = CosineHead::new(array![[1.0, 0.0]], 1.0).unwrap();
        assert!(matches!(
            cosine_logits(&[0.0, 0.0], &head),
            Err(Error::ZeroVector { .. })
        ));
        assert!(cosine_logits(&[1.0, 2.0, 3.0], &head).is_err());
    }

    #[test]
    fn linear_logits_affine() {
        let head = LinearHead::new(array![[1.0, 2.0], [0.0, -1.0]], array![0.5, 0.0]).unwrap();
        let z = linear_logits(&[2.0, 3.0], &head).unwrap();
        assert_eq!(z, vec![8.5, -3.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let z = [1.5, 1.5];
        let loss = softmax_cross_entropy(&z, 0).unwrap();
        // log 2, 50-digit reference value.
        assert!((loss - 0.69314718055994530942).abs() < TIGHT);
    }

    #[test]
    fn cross_entropy_two_logits_reference() {
        // z = (0, 1), y = 0: loss = log(1 + e), reference 1.3132616875182228.
        let loss = softmax_cross_entropy(&[0.0, 1.0], 0).unwrap();
        assert!((loss - 1.313261687518222834).abs() < TIGHT);
    }

    #[test]
    fn cross_entropy_huge_logits_stay_finite() {
        let loss = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.is_finite());
        assert!(loss.abs() < 1e-300); // e^{-1000} underflows to exactly 0
        let losing = softmax_cross_entropy(&[1000.0, 0.0], 1).unwrap();
        assert!((losing - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0, 1.0], 2),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(softmax_cross_entropy_grad(&[0.0, 1.0], 5).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[0.1, -2.0, 3.0, 0.0]);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < TIGHT);
        assert!(p.iter().all(|&x| x > 0.0));
    }

    fn finite_vec(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(lo..hi, len)
    }

    proptest! {
        #[test]
        fn normalizing_is_idempotent(v in finite_vec(4, -10.0, 10.0)) {
            prop_assume!(l2_norm(&v) > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!((l2_norm(&once) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cosines_ignore_input_scale(v in finite_vec(3, -5.0, 5.0), c in 0.01f64..100.0) {
            prop_assume!(l2_norm(&v) > 1e-3);
            let head = CosineHead::new(
                ndarray::array![[1.0, 2.0, -1.0], [0.5, -0.5, 3.0]],
                32.0,
            ).unwrap();
            let base = cosine_logits(&v, &head).unwrap();
            let scaled_in: Vec<f64> = v.iter().map(|x| x * c).collect();
            let scaled = cosine_logits(&scaled_in, &head).unwrap();
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn cross_entropy_shift_invariant(z in finite_vec(5, -30.0, 30.0), c in -50.0f64..50.0, y in 0usize..5) {
            let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
            let a = softmax_cross_entropy(&z, y).unwrap();
            let b = softmax_cross_entropy(&shifted, y).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn cross_entropy_gradient_matches_finite_differences(
            z in finite_vec(4, -8.0, 8.0),
            y in 0usize..4,
        ) {
            let g = softmax_cross_entropy_grad(&z, y).unwrap();
            let h = 1e-5;
            for i in 0..z.len() {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += h;
                zm[i] -= h;
                let fd = (softmax_cross_entropy(&zp, y).unwrap()
                    - softmax_cross_entropy(&zm, y).unwrap())
                    / (2.0 * h);
                // The floor keeps roundoff in the difference quotient from
                // dominating where the true component is vanishingly small.
                let denom = g[i].abs().max(fd.abs()).max(1e-2);
                prop_assert!((g[i] - fd).abs() / denom < 1e-6);
            }
        }

        #[test]
        fn gradient_sums_to_zero(z in finite_vec(6, -20.0, 20.0), y in 0usize..6) {
            let g = softmax_cross_entropy_grad(&z, y).unwrap();
            let total: f64 = g.iter().sum();
            prop_assert!(total.abs() < 1e-12);
        }
    }
}
