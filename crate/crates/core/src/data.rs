//! Synthetic long-tailed classification data and its on-disk formats.
//!
//! Generation places one unit-direction center per class (rejection-sampled
//! so no two centers have cosine similarity above 0.95), scales them to a
//! common norm, and draws isotropic Gaussian samples around them. Class
//! counts on the training split decay exponentially from `max_count` down
//! by a factor of `imbalance`; the test split is balanced.
//!
//! Two interchangeable file formats exist: a little-endian binary format
//! (magic `DBMDSET\0`) that is byte-exact, and a CSV with a metadata
//! comment line that round-trips `f64` values exactly via shortest
//! decimal representation. The loader sniffs the magic to pick a parser.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::ClassPrior;
use crate::numerics::{dot, l2_norm};

pub const MAGIC: &[u8; 8] = b"DBMDSET\0";
pub const FORMAT_VERSION: u32 = 1;

/// Two class centers closer than this (in cosine) are resampled.
pub const MAX_CENTER_COS: f64 = 0.95;
const CENTER_ATTEMPTS: usize = 1000;

/// Where a dataset came from; informational only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Generated,
    Loaded,
    InMemory,
}

/// A feature matrix (one sample per row) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
    class_counts: Vec<usize>,
    provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        classes: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("a dataset needs at least one class"));
        }
        if features.nrows() != labels.len() {
            return Err(Error::shape(
                format!("{} labels (one per row)", features.nrows()),
                format!("{}", labels.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: classes,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features contain non-finite values"));
        }
        let mut class_counts = vec![0usize; classes];
        for &y in &labels {
            class_counts[y] += 1;
        }
        Ok(LabeledDataset {
            features,
            labels,
            classes,
            class_counts,
            provenance,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Class frequencies as a loss prior; fails when some class has no
    /// samples.
    pub fn prior(&self) -> Result<ClassPrior> {
        ClassPrior::new(self.class_counts.clone())
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub classes: usize,
    pub dim: usize,
    /// Ratio between the most and least frequent training class, >= 1.
    pub imbalance: f64,
    /// Training count of the most frequent class.
    pub max_count: usize,
    /// Test samples per class (balanced split).
    pub test_per_class: usize,
    /// Isotropic noise standard deviation; 0 collapses samples onto centers.
    pub intra_std: f64,
    /// Euclidean norm of every class center.
    pub center_norm: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::invalid("need at least one class"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if !(self.imbalance.is_finite() && self.imbalance >= 1.0) {
            return Err(Error::invalid(format!(
                "imbalance ratio must be finite and >= 1, got {}",
                self.imbalance
            )));
        }
        if self.max_count == 0 {
            return Err(Error::invalid("max_count must be positive"));
        }
        if !(self.intra_std.is_finite() && self.intra_std >= 0.0) {
            return Err(Error::invalid(format!(
                "intra_std must be finite and >= 0, got {}",
                self.intra_std
            )));
        }
        if !(self.center_norm.is_finite() && self.center_norm > 0.0) {
            return Err(Error::invalid(format!(
                "center_norm must be finite and > 0, got {}",
                self.center_norm
            )));
        }
        Ok(())
    }
}

/// Exponentially decaying class counts: class `i` of `C` gets
/// `round(max_count * imbalance^(-i/(C-1)))`, clamped to at least 1.
/// Class 0 always gets exactly `max_count`; with one class the whole
/// profile is just `[max_count]`.
pub fn exponential_counts(max_count: usize, classes: usize, imbalance: f64) -> Result<Vec<usize>> {
    if classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    if max_count == 0 {
        return Err(Error::invalid("max_count must be positive"));
    }
    if !(imbalance.is_finite() && imbalance >= 1.0) {
        return Err(Error::invalid(format!(
            "imbalance ratio must be finite and >= 1, got {imbalance}"
        )));
    }
    if classes == 1 {
        return Ok(vec![max_count]);
    }
    let denom = (classes - 1) as f64;
    Ok((0..classes)
        .map(|i| {
            let frac = i as f64 / denom;
            let n = (max_count as f64) * imbalance.powf(-frac);
            (n.round() as usize).max(1)
        })
        .collect())
}

/// A generated train/test pair plus the centers that produced it.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    /// One row per class, each of norm `center_norm`.
    pub centers: Array2<f64>,
}

/// Draws a long-tailed training set and a balanced test set. Deterministic
/// in `cfg.seed`; the draw order (centers, then train rows class by class,
/// then test rows) is part of the format and must not change.
pub fn generate(cfg: &GenConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let counts = exponential_counts(cfg.max_count, cfg.classes, cfg.imbalance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = StandardNormal;

    let mut centers = Array2::zeros((cfg.classes, cfg.dim));
    let mut unit_centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    for c in 0..cfg.classes {
        let mut attempts = 0;
        loop {
            if attempts >= CENTER_ATTEMPTS {
                return Err(Error::CenterSamplingFailed { attempts });
            }
            attempts += 1;
            let dir: Vec<f64> = (0..cfg.dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = l2_norm(&dir);
            if norm < 1e-12 {
                continue;
            }
            let unit: Vec<f64> = dir.iter().map(|x| x / norm).collect();
            if unit_centers.iter().all(|u| dot(u, &unit) < MAX_CENTER_COS) {
                for (j, &u) in unit.iter().enumerate() {
                    centers[(c, j)] = u * cfg.center_norm;
                }
                unit_centers.push(unit);
                break;
            }
        }
    }

    let draw_split = |per_class: &[usize], rng: &mut ChaCha8Rng| -> (Array2<f64>, Vec<usize>) {
        let total: usize = per_class.iter().sum();
        let mut features = Array2::zeros((total, cfg.dim));
        let mut labels = Vec::with_capacity(total);
        let mut row = 0;
        for (c, &n) in per_class.iter().enumerate() {
            for _ in 0..n {
                for j in 0..cfg.dim {
                    let z: f64 = normal.sample(rng);
                    features[(row, j)] = centers[(c, j)] + cfg.intra_std * z;
                }
                labels.push(c);
                row += 1;
            }
        }
        (features, labels)
    };

    let (train_x, train_y) = draw_split(&counts, &mut rng);
    let test_counts = vec![cfg.test_per_class; cfg.classes];
    let (test_x, test_y) = draw_split(&test_counts, &mut rng);

    Ok(GeneratedData {
        train: LabeledDataset::new(train_x, train_y, cfg.classes, Provenance::Generated)?,
        test: LabeledDataset::new(test_x, test_y, cfg.classes, Provenance::Generated)?,
        centers,
    })
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::invalid(format!("{what} too large for the file format")))
}

/// Writes the byte-exact binary format.
pub fn save_dataset_binary(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(32 + ds.len() * (4 + 8 * ds.dim()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(ds.classes(), "class count")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(ds.dim(), "feature dimension")?.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for &n in ds.class_counts() {
        buf.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for &y in ds.labels() {
        buf.extend_from_slice(&to_u32(y, "label")?.to_le_bytes());
    }
    for &v in ds.features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Writes the CSV format: a metadata comment, a header, then one row per
/// sample with shortest-roundtrip float formatting.
pub fn save_dataset_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let counts = ds
        .class_counts()
        .iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join("|");
    let _ = writeln!(
        out,
        "# DBMDSET v{} classes={} dim={} rows={} counts={}",
        FORMAT_VERSION,
        ds.classes(),
        ds.dim(),
        ds.len(),
        counts
    );
    out.push_str("label");
    for j in 0..ds.dim() {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for (row, &y) in ds.features.rows().into_iter().zip(ds.labels()) {
        let _ = write!(out, "{y}");
        for v in row.iter() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct ByteCursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::parse(
                0,
                format!(
                    "file truncated: needed {} bytes at offset {}, have {}",
                    n,
                    self.pos,
                    self.data.len() - self.pos
                ),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn load_binary(bytes: &[u8]) -> Result<LabeledDataset> {
    let mut cur = ByteCursor {
        data: bytes,
        pos: MAGIC.len(),
    };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::parse(
            0,
            format!("unsupported dataset format version {version}"),
        ));
    }
    let classes = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    let rows = cur.u64()? as usize;
    if classes == 0 || dim == 0 {
        return Err(Error::parse(0, "header declares an empty dataset shape"));
    }
    let mut declared = Vec::with_capacity(classes);
    for _ in 0..classes {
        declared.push(cur.u64()?);
    }
    if declared.iter().sum::<u64>() != rows as u64 {
        return Err(Error::parse(
            0,
            "per-class counts do not sum to the declared row count",
        ));
    }
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        let y = cur.u32()? as usize;
        if y >= classes {
            return Err(Error::parse(
                0,
                format!("label {y} out of range for {classes} classes"),
            ));
        }
        labels.push(y);
    }
    let mut values = Vec::with_capacity(rows * dim);
    for _ in 0..rows * dim {
        let v = cur.f64()?;
        if !v.is_finite() {
            return Err(Error::parse(0, "non-finite feature value"));
        }
        values.push(v);
    }
    if cur.pos != bytes.len() {
        return Err(Error::parse(
            0,
            format!("{} trailing bytes after the feature block", bytes.len() - cur.pos),
        ));
    }
    let features = Array2::from_shape_vec((rows, dim), values).expect("sized above");
    let ds = LabeledDataset::new(features, labels, classes, Provenance::Loaded)?;
    for (c, (&actual, &decl)) in ds.class_counts().iter().zip(&declared).enumerate() {
        if actual as u64 != decl {
            return Err(Error::CountMismatch {
                class: c,
                declared: decl,
                actual: actual as u64,
            });
        }
    }
    Ok(ds)
}

fn meta_field(fields: &[(&str, &str)], key: &str) -> Result<String> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| v.to_string())
        .ok_or_else(|| Error::parse(1, format!("metadata line is missing `{key}=`")))
}

fn load_csv(text: &str) -> Result<LabeledDataset> {
    let mut lines = text.lines().enumerate();
    let (_, meta) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "empty file"))?;
    let expect_prefix = format!("# DBMDSET v{FORMAT_VERSION} ");
    let rest = meta.strip_prefix(&expect_prefix).ok_or_else(|| {
        Error::parse(
            1,
            format!("expected metadata line starting with `{expect_prefix}`"),
        )
    })?;
    let fields: Vec<(&str, &str)> = rest
        .split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .collect();
    let parse_usize = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::parse(1, format!("bad {what}: `{s}`")))
    };
    let classes = parse_usize(&meta_field(&fields, "classes")?, "class count")?;
    let dim = parse_usize(&meta_field(&fields, "dim")?, "dimension")?;
    let rows = parse_usize(&meta_field(&fields, "rows")?, "row count")?;
    let declared: Vec<u64> = meta_field(&fields, "counts")?
        .split('|')
        .map(|t| {
            t.parse()
                .map_err(|_| Error::parse(1, format!("bad count `{t}`")))
        })
        .collect::<Result<_>>()?;
    if declared.len() != classes {
        return Err(Error::parse(
            1,
            format!("expected {classes} counts, found {}", declared.len()),
        ));
    }

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(2, "missing column header"))?;
    if !header.starts_with("label") {
        return Err(Error::parse(2, "column header must start with `label`"));
    }

    let mut labels = Vec::with_capacity(rows);
    let mut values = Vec::with_capacity(rows * dim);
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let y: usize = parts
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::parse(lineno, "bad label"))?;
        if y >= classes {
            return Err(Error::parse(
                lineno,
                format!("label {y} out of range for {classes} classes"),
            ));
        }
        labels.push(y);
        let mut got = 0;
        for tok in parts {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| Error::parse(lineno, format!("bad float `{tok}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(lineno, "non-finite feature value"));
            }
            values.push(v);
            got += 1;
        }
        if got != dim {
            return Err(Error::parse(
                lineno,
                format!("expected {dim} feature columns, found {got}"),
            ));
        }
    }
    if labels.len() != rows {
        return Err(Error::parse(
            0,
            format!("metadata declares {rows} rows, file has {}", labels.len()),
        ));
    }
    let features = Array2::from_shape_vec((rows, dim), values).expect("validated per row");
    let ds = LabeledDataset::new(features, labels, classes, Provenance::Loaded)?;
    for (c, (&actual, &decl)) in ds.class_counts().iter().zip(&declared).enumerate() {
        if actual as u64 != decl {
            return Err(Error::CountMismatch {
                class: c,
                declared: decl,
                actual: actual as u64,
            });
        }
    }
    Ok(ds)
}

/// Loads either format, dispatching on the binary magic.
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        load_binary(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::parse(0, "file is neither the binary format nor UTF-8 text"))?;
        load_csv(text)
    }
}
