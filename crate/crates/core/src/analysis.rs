//! Post-hoc analysis of trained models on long-tailed data.
//!
//! Three lenses:
//!
//! - **Shot-group accuracy**: classes are bucketed by training frequency
//!   (many / medium / few), either with absolute count thresholds or by
//!   terciles, and accuracy is reported per bucket.
//! - **Angular compactness**: for cosine-head models, the angle in degrees
//!   between each feature and its class prototype, summarized by quartiles
//!   per bucket.
//! - **Class separability**: for each class pair, samples are projected on
//!   the regularized two-class LDA direction and scored with the Fisher
//!   criterion `(mu_a - mu_b)^2 / (var_a + var_b)`; a class's score is its
//!   mean criterion against all others.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{safe_acos, CosineHead};

/// Scale of the default LDA ridge: `1e-4 * trace(S_w) / dim`.
pub const RIDGE_SCALE: f64 = 1e-4;
/// Condition-number estimate beyond which the scatter is declared singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Frequency bucket of a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Many => "many",
            Group::Medium => "medium",
            Group::Few => "few",
        })
    }
}

/// Absolute-count bucketing: more than `many_min` training samples is
/// "many", fewer than `few_max` is "few", the rest "medium".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupThresholds {
    pub many_min: usize,
    pub few_max: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        GroupThresholds {
            many_min: 100,
            few_max: 20,
        }
    }
}

impl GroupThresholds {
    pub fn validate(&self) -> Result<()> {
        if self.few_max > self.many_min {
            return Err(Error::invalid(format!(
                "few threshold ({}) must not exceed many threshold ({})",
                self.few_max, self.many_min
            )));
        }
        Ok(())
    }

    pub fn assign(&self, train_count: usize) -> Group {
        if train_count > self.many_min {
            Group::Many
        } else if train_count < self.few_max {
            Group::Few
        } else {
            Group::Medium
        }
    }

    pub fn groups(&self, train_counts: &[usize]) -> Vec<Group> {
        train_counts.iter().map(|&n| self.assign(n)).collect()
    }
}

/// Relative bucketing: classes ranked by training count (descending, ties
/// by class index); the top third is "many", the bottom third "few".
pub fn tercile_groups(train_counts: &[usize]) -> Vec<Group> {
    let c = train_counts.len();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(train_counts[i]));
    let mut groups = vec![Group::Medium; c];
    for (rank, &class) in order.iter().enumerate() {
        groups[class] = if rank < c / 3 {
            Group::Many
        } else if rank < 2 * c / 3 {
            Group::Medium
        } else {
            Group::Few
        };
    }
    groups
}

/// Accuracy overall, per bucket, and per class. A bucket with no test
/// samples reports `None` — deliberately distinct from an accuracy of zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

impl GroupAccuracy {
    pub fn of(&self, g: Group) -> Option<f64> {
        match g {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }
}

/// Sample-level accuracy split by the class buckets in `groups` (one entry
/// per class).
pub fn group_accuracy(
    predictions: &[usize],
    labels: &[usize],
    groups: &[Group],
) -> Result<GroupAccuracy> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            format!("{} predictions", labels.len()),
            format!("{}", predictions.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("cannot score an empty label set"));
    }
    let classes = groups.len();
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= classes {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: classes,
            });
        }
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let bucket = |g: Group| -> Option<f64> {
        let (h, t) = (0..classes)
            .filter(|&c| groups[c] == g)
            .fold((0usize, 0usize), |(h, t), c| (h + hits[c], t + totals[c]));
        (t > 0).then(|| h as f64 / t as f64)
    };
    Ok(GroupAccuracy {
        overall: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
        many: bucket(Group::Many),
        medium: bucket(Group::Medium),
        few: bucket(Group::Few),
        per_class: (0..classes)
            .map(|c| (totals[c] > 0).then(|| hits[c] as f64 / totals[c] as f64))
            .collect(),
    })
}

/// Mean and quartiles of a sample, quartiles by inclusive linear
/// interpolation (quantile `q` sits at fractional position `q * (n - 1)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuartileSummary {
    pub count: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Summarizes a set of values; `None` when empty.
pub fn summarize(values: &[f64]) -> Option<QuartileSummary> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaNs in summaries"));
    Some(QuartileSummary {
        count: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
    })
}

/// Angle in degrees between each sample's feature and its own class row of
/// the cosine head.
pub fn angular_distances_deg(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    head: &CosineHead,
) -> Result<Vec<f64>> {
    if features.nrows() != labels.len() {
        return Err(Error::shape(
            format!("{} labels (one per row)", features.nrows()),
            format!("{}", labels.len()),
        ));
    }
    features
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            if y >= head.classes() {
                return Err(Error::IndexOutOfRange {
                    index: y,
                    len: head.classes(),
                });
            }
            let cos = head.cosines(row.as_slice().expect("row-major"))?;
            Ok(safe_acos(cos[y]).to_degrees())
        })
        .collect()
}

/// Quartile summaries of angular distance, overall and per bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularStats {
    pub overall: QuartileSummary,
    pub many: Option<QuartileSummary>,
    pub medium: Option<QuartileSummary>,
    pub few: Option<QuartileSummary>,
}

pub fn angular_stats(
    theta_deg: &[f64],
    labels: &[usize],
    groups: &[Group],
) -> Result<AngularStats> {
    if theta_deg.len() != labels.len() {
        return Err(Error::shape(
            format!("{} labels", theta_deg.len()),
            format!("{}", labels.len()),
        ));
    }
    if theta_deg.is_empty() {
        return Err(Error::invalid("no angles to summarize"));
    }
    let mut per_group: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (&t, &y) in theta_deg.iter().zip(labels) {
        if y >= groups.len() {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: groups.len(),
            });
        }
        let slot = match groups[y] {
            Group::Many => 0,
            Group::Medium => 1,
            Group::Few => 2,
        };
        per_group[slot].push(t);
    }
    Ok(AngularStats {
        overall: summarize(theta_deg).expect("non-empty"),
        many: summarize(&per_group[0]),
        medium: summarize(&per_group[1]),
        few: summarize(&per_group[2]),
    })
}

/// Lower-triangular Cholesky factor; `None` when the matrix is not
/// (numerically) positive definite.
fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag.is_finite() && diag > 0.0) {
            return None;
        }
        let lj = diag.sqrt();
        l[(j, j)] = lj;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / lj;
        }
    }
    Some(l)
}

/// Solves `A x = b` given the Cholesky factor `L` of `A`.
fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l[(i, k)] * y[k];
        }
        y[i] = v / l[(i, i)];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in (i + 1)..n {
            v -= l[(k, i)] * x[k];
        }
        x[i] = v / l[(i, i)];
    }
    x
}

/// Order-of-magnitude estimate of the SPD condition number via power
/// iteration for the largest eigenvalue and inverse iteration (through the
/// Cholesky factor) for the smallest.
fn condition_estimate(a: &Array2<f64>, l: &Array2<f64>) -> f64 {
    let n = a.nrows();
    if n == 1 {
        return 1.0;
    }
    let start: Array1<f64> = (0..n).map(|i| 1.0 + 0.01 * i as f64).collect();

    let mut v = start.clone();
    let mut lam_max = 0.0;
    for _ in 0..40 {
        let w = a.dot(&v);
        let norm = w.dot(&w).sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return f64::INFINITY;
        }
        lam_max = norm;
        v = w / norm;
    }

    let mut u = start;
    let mut inv_norm = 0.0;
    for _ in 0..40 {
        let w = cholesky_solve(l, &u);
        let norm = w.dot(&w).sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return f64::INFINITY;
        }
        inv_norm = norm;
        u = w / norm;
    }
    let lam_min = 1.0 / inv_norm;
    if lam_min <= 0.0 || !lam_min.is_finite() {
        return f64::INFINITY;
    }
    lam_max / lam_min
}

fn mean_rows(x: ArrayView2<'_, f64>) -> Array1<f64> {
    let mut mu = Array1::<f64>::zeros(x.ncols());
    for row in x.rows() {
        mu += &row;
    }
    mu / x.nrows() as f64
}

/// Adds `sum (x - mu)(x - mu)^T` over the rows of `x` into `acc`.
fn accumulate_scatter(acc: &mut Array2<f64>, x: ArrayView2<'_, f64>, mu: &Array1<f64>) {
    for row in x.rows() {
        let d = &row - mu;
        for i in 0..d.len() {
            for j in 0..d.len() {
                acc[(i, j)] += d[i] * d[j];
            }
        }
    }
}

/// Two-class LDA direction `(S_w + ridge I)^-1 (mu_a - mu_b)`, where `S_w`
/// is the summed within-class scatter. `ridge = None` picks
/// `RIDGE_SCALE * trace(S_w) / dim`. Fails with [`Error::SingularScatter`]
/// when the regularized scatter is not positive definite or its condition
/// estimate exceeds [`CONDITION_LIMIT`].
pub fn lda_direction(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    ridge: Option<f64>,
) -> Result<Array1<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape(
            format!("matching dimensions, {}", a.ncols()),
            format!("{}", b.ncols()),
        ));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::invalid(
            "each class needs at least two samples for a scatter estimate",
        ));
    }
    if let Some(r) = ridge {
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::invalid(format!(
                "ridge must be finite and >= 0, got {r}"
            )));
        }
    }
    let d = a.ncols();
    let mu_a = mean_rows(a);
    let mu_b = mean_rows(b);
    let mut s_w = Array2::<f64>::zeros((d, d));
    accumulate_scatter(&mut s_w, a, &mu_a);
    accumulate_scatter(&mut s_w, b, &mu_b);

    let trace: f64 = (0..d).map(|i| s_w[(i, i)]).sum();
    let lambda = ridge.unwrap_or(RIDGE_SCALE * trace / d as f64);
    for i in 0..d {
        s_w[(i, i)] += lambda;
    }

    let l = cholesky(&s_w).ok_or(Error::SingularScatter {
        cond: f64::INFINITY,
    })?;
    let cond = condition_estimate(&s_w, &l);
    if cond > CONDITION_LIMIT {
        return Err(Error::SingularScatter { cond });
    }
    Ok(cholesky_solve(&l, &(&mu_a - &mu_b)))
}

/// Fisher criterion of two projected samples:
/// `(mean_a - mean_b)^2 / (var_a + var_b)` with population variances.
/// Both-degenerate cases: 0 when the means also agree, infinity otherwise.
pub fn fisher_ratio(a: &[f64], b: &[f64]) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let pop_var = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let sep = (ma - mb) * (ma - mb);
    let denom = pop_var(a, ma) + pop_var(b, mb);
    if denom < 1e-30 {
        return if sep < 1e-30 { 0.0 } else { f64::INFINITY };
    }
    sep / denom
}

/// Per-class separability: for every unordered class pair, project both
/// classes on their LDA direction and take the Fisher criterion; a class's
/// score is the mean over its `C - 1` pairings.
pub fn class_separability(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    classes: usize,
    ridge: Option<f64>,
) -> Result<Vec<f64>> {
    if classes < 2 {
        return Err(Error::invalid("separability needs at least two classes"));
    }
    if features.nrows() != labels.len() {
        return Err(Error::shape(
            format!("{} labels (one per row)", features.nrows()),
            format!("{}", labels.len()),
        ));
    }
    let d = features.ncols();
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for (row, &y) in features.rows().into_iter().zip(labels) {
        if y >= classes {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: classes,
            });
        }
        rows[y].extend(row.iter().copied());
    }
    let per_class: Vec<Array2<f64>> = rows
        .into_iter()
        .enumerate()
        .map(|(c, v)| {
            let n = v.len() / d;
            if n < 2 {
                return Err(Error::invalid(format!(
                    "class {c} has {n} samples; separability needs at least 2"
                )));
            }
            Ok(Array2::from_shape_vec((n, d), v).expect("grouped by construction"))
        })
        .collect::<Result<_>>()?;

    let mut scores = vec![0.0; classes];
    for i in 0..classes {
        for j in (i + 1)..classes {
            let w = lda_direction(per_class[i].view(), per_class[j].view(), ridge)?;
            let pa: Vec<f64> = per_class[i].rows().into_iter().map(|r| r.dot(&w)).collect();
            let pb: Vec<f64> = per_class[j].rows().into_iter().map(|r| r.dot(&w)).collect();
            let fisher = fisher_ratio(&pa, &pb);
            scores[i] += fisher;
            scores[j] += fisher;
        }
    }
    for s in scores.iter_mut() {
        *s /= (classes - 1) as f64;
    }
    Ok(scores)
}

/// Mean separability over the classes of each bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub per_class: Vec<f64>,
    pub overall: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

pub fn separability_report(per_class: &[f64], groups: &[Group]) -> Result<SeparabilityReport> {
    if per_class.len() != groups.len() {
        return Err(Error::shape(
            format!("{} groups", per_class.len()),
            format!("{}", groups.len()),
        ));
    }
    if per_class.is_empty() {
        return Err(Error::invalid("no separability scores to aggregate"));
    }
    let bucket = |g: Group| -> Option<f64> {
        let vals: Vec<f64> = per_class
            .iter()
            .zip(groups)
            .filter(|(_, gg)| **gg == g)
            .map(|(v, _)| *v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(SeparabilityReport {
        per_class: per_class.to_vec(),
        overall: per_class.iter().sum::<f64>() / per_class.len() as f64,
        many: bucket(Group::Many),
        medium: bucket(Group::Medium),
        few: bucket(Group::Few),
    })
}

/// One row of the per-class analysis table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassRow {
    pub class: usize,
    pub train_count: usize,
    pub group: Group,
    pub accuracy: Option<f64>,
    pub mean_angle_deg: Option<f64>,
    pub separability: Option<f64>,
}

/// The full analysis artifact: accuracy, optional angular statistics
/// (cosine heads only), optional separability, and a per-class table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub groups: Vec<Group>,
    pub accuracy: GroupAccuracy,
    pub angular: Option<AngularStats>,
    pub separability: Option<SeparabilityReport>,
    pub per_class: Vec<PerClassRow>,
}

/// Assembles the report from precomputed pieces. `theta_deg` pairs with
/// `labels` (the evaluated split); `separability` has one score per class.
pub fn build_report(
    predictions: &[usize],
    labels: &[usize],
    train_counts: &[usize],
    groups: &[Group],
    theta_deg: Option<&[f64]>,
    separability: Option<&[f64]>,
) -> Result<AnalysisReport> {
    if train_counts.len() != groups.len() {
        return Err(Error::shape(
            format!("{} train counts", groups.len()),
            format!("{}", train_counts.len()),
        ));
    }
    let accuracy = group_accuracy(predictions, labels, groups)?;
    let angular = theta_deg
        .map(|t| angular_stats(t, labels, groups))
        .transpose()?;
    let sep = separability
        .map(|s| separability_report(s, groups))
        .transpose()?;

    // Per-class mean angle.
    let classes = groups.len();
    let mut mean_angle = vec![None; classes];
    if let Some(t) = theta_deg {
        let mut sums = vec![0.0; classes];
        let mut counts = vec![0usize; classes];
        for (&v, &y) in t.iter().zip(labels) {
            sums[y] += v;
            counts[y] += 1;
        }
        for c in 0..classes {
            if counts[c] > 0 {
                mean_angle[c] = Some(sums[c] / counts[c] as f64);
            }
        }
    }

    let per_class = (0..classes)
        .map(|c| PerClassRow {
            class: c,
            train_count: train_counts[c],
            group: groups[c],
            accuracy: accuracy.per_class[c],
            mean_angle_deg: mean_angle[c],
            separability: separability.map(|s| s[c]),
        })
        .collect();

    Ok(AnalysisReport {
        groups: groups.to_vec(),
        accuracy,
        angular,
        separability: sep,
        per_class,
    })
}

impl AnalysisReport {
    /// Flat per-class CSV with shortest-roundtrip floats; optional columns
    /// are left empty.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("class,train_count,group,accuracy,mean_angle_deg,separability\n");
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.per_class {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                row.class,
                row.train_count,
                row.group,
                fmt_opt(row.accuracy),
                fmt_opt(row.mean_angle_deg),
                fmt_opt(row.separability),
            );
        }
        out
    }
}
