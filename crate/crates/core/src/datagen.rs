//! Synthetic classification data with per-class difficulty and label-noise
//! injection that keeps the hidden ground truth alongside the observed labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Feature matrix with ground-truth labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanDataset {
    features: Vec<f64>,
    dim: usize,
    true_labels: Vec<usize>,
    num_classes: usize,
    per_class_separation: Option<Vec<f64>>,
}

impl CleanDataset {
    /// Builds a dataset from row-major features, checking every invariant.
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        true_labels: Vec<usize>,
        num_classes: usize,
        per_class_separation: Option<Vec<f64>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "must be positive"));
        }
        if num_classes < 2 {
            return Err(Error::param("num_classes", "need at least 2 classes"));
        }
        if features.len() != true_labels.len() * dim {
            return Err(Error::Shape {
                context: "dataset features",
                expected: true_labels.len() * dim,
                got: features.len(),
            });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature of sample {}", i / dim)));
        }
        let mut counts = vec![0usize; num_classes];
        for &y in &true_labels {
            if y >= num_classes {
                return Err(Error::param(
                    "true_labels",
                    format!("label {y} outside [0, {num_classes})"),
                ));
            }
            counts[y] += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c < 2) {
            return Err(Error::param(
                "true_labels",
                format!("class {k} has fewer than 2 samples"),
            ));
        }
        if let Some(sep) = &per_class_separation {
            if sep.len() != num_classes {
                return Err(Error::Shape {
                    context: "per-class separation",
                    expected: num_classes,
                    got: sep.len(),
                });
            }
        }
        Ok(Self {
            features,
            dim,
            true_labels,
            num_classes,
            per_class_separation,
        })
    }

    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn per_class_separation(&self) -> Option<&[f64]> {
        self.per_class_separation.as_deref()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.true_labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
}

/// A dataset whose observed labels may differ from the hidden true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    base: CleanDataset,
    observed_labels: Vec<usize>,
    corrupted: Vec<bool>,
    noise_kind: NoiseKind,
    noise_rate: f64,
}

impl NoisyDataset {
    fn from_observed(
        base: CleanDataset,
        observed_labels: Vec<usize>,
        noise_kind: NoiseKind,
        noise_rate: f64,
    ) -> Self {
        let corrupted = observed_labels
            .iter()
            .zip(base.true_labels())
            .map(|(o, t)| o != t)
            .collect();
        Self {
            base,
            observed_labels,
            corrupted,
            noise_kind,
            noise_rate,
        }
    }

    /// Wraps a clean dataset with observed labels equal to the true ones.
    pub fn clean(base: CleanDataset) -> Self {
        let observed = base.true_labels().to_vec();
        Self::from_observed(base, observed, NoiseKind::Symmetric, 0.0)
    }

    pub fn base(&self) -> &CleanDataset {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.base.feature(i)
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.observed_labels
    }

    pub fn true_labels(&self) -> &[usize] {
        self.base.true_labels()
    }

    pub fn corrupted(&self) -> &[bool] {
        &self.corrupted
    }

    pub fn is_clean(&self) -> Vec<bool> {
        self.corrupted.iter().map(|c| !c).collect()
    }

    pub fn noise_kind(&self) -> NoiseKind {
        self.noise_kind
    }

    pub fn noise_rate(&self) -> f64 {
        self.noise_rate
    }

    pub fn corrupted_fraction(&self) -> f64 {
        self.corrupted.iter().filter(|&&c| c).count() as f64 / self.len() as f64
    }

    /// Writes features, observed labels and the eval-only ground truth to JSON.
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = DatasetFile {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            num_classes: self.num_classes(),
            dim: self.dim(),
            features: self.base.features.clone(),
            observed_labels: self.observed_labels.clone(),
            noise_kind: self.noise_kind,
            noise_rate: self.noise_rate,
            eval_only: GroundTruth {
                true_labels: self.base.true_labels.clone(),
                corrupted: self.corrupted.clone(),
                per_class_separation: self.base.per_class_separation.clone(),
            },
        };
        let text = serde_json::to_string(&file).expect("dataset serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if file.format != DATASET_FORMAT || file.version != DATASET_VERSION {
            return Err(bad(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        let base = CleanDataset::new(
            file.features,
            file.dim,
            file.eval_only.true_labels,
            file.num_classes,
            file.eval_only.per_class_separation,
        )?;
        if file.observed_labels.len() != base.len() {
            return Err(bad("observed label count differs from sample count".into()));
        }
        if file.observed_labels.iter().any(|&y| y >= base.num_classes()) {
            return Err(bad("observed label out of range".into()));
        }
        let ds =
            Self::from_observed(base, file.observed_labels, file.noise_kind, file.noise_rate);
        if ds.corrupted != file.eval_only.corrupted {
            return Err(bad("corruption flags disagree with labels".into()));
        }
        Ok(ds)
    }
}

const DATASET_FORMAT: &str = "protoclean-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    format: String,
    version: u32,
    num_classes: usize,
    dim: usize,
    features: Vec<f64>,
    observed_labels: Vec<usize>,
    noise_kind: NoiseKind,
    noise_rate: f64,
    /// Hidden ground truth. Only evaluators may read this section.
    eval_only: GroundTruth,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundTruth {
    true_labels: Vec<usize>,
    corrupted: Vec<bool>,
    per_class_separation: Option<Vec<f64>>,
}

/// Gaussian cluster centers; sampling from the same generator with different
/// seeds yields train and test sets from one distribution.
#[derive(Debug, Clone)]
pub struct BlobGenerator {
    dim: usize,
    separations: Vec<f64>,
    centers: Vec<Vec<f64>>,
}

impl BlobGenerator {
    /// Class `k` is centered at distance `separations[k]` from the origin
    /// along a random direction; within-class noise is unit variance.
    pub fn new(num_classes: usize, dim: usize, separations: &[f64], seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::param("num_classes", "need at least 2 classes"));
        }
        if dim < 2 {
            return Err(Error::param("dim", "need at least 2 dimensions"));
        }
        if separations.len() != num_classes {
            return Err(Error::Shape {
                context: "separations",
                expected: num_classes,
                got: separations.len(),
            });
        }
        if separations.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::param("separations", "must be finite and positive"));
        }
        let mut rng = rng::seeded(seed, stream::CENTERS);
        let centers = separations
            .iter()
            .map(|&sep| {
                let dir = loop {
                    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1e-8 {
                        break v.into_iter().map(|x| x / norm).collect::<Vec<_>>();
                    }
                };
                dir.into_iter().map(|x| x * sep).collect()
            })
            .collect();
        Ok(Self {
            dim,
            separations: separations.to_vec(),
            centers,
        })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Draws `counts[k]` samples from class `k`, class-major order.
    pub fn sample(&self, counts: &[usize], seed: u64) -> Result<CleanDataset> {
        if counts.len() != self.centers.len() {
            return Err(Error::Shape {
                context: "per-class counts",
                expected: self.centers.len(),
                got: counts.len(),
            });
        }
        if counts.iter().any(|&c| c < 2) {
            return Err(Error::param("n_per_class", "need at least 2 samples per class"));
        }
        let mut rng = rng::seeded(seed, stream::SAMPLES);
        let total: usize = counts.iter().sum();
        let mut features = Vec::with_capacity(total * self.dim);
        let mut labels = Vec::with_capacity(total);
        for (k, (&n, center)) in counts.iter().zip(&self.centers).enumerate() {
            for _ in 0..n {
                features.extend(center.iter().map(|c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + z
                }));
                labels.push(k);
            }
        }
        CleanDataset::new(
            features,
            self.dim,
            labels,
            self.centers.len(),
            Some(self.separations.clone()),
        )
    }
}

/// `num_classes` Gaussian blobs with `n_per_class` samples each.
pub fn make_blobs(
    n_per_class: usize,
    num_classes: usize,
    dim: usize,
    separations: &[f64],
    seed: u64,
) -> Result<CleanDataset> {
    if n_per_class < 2 {
        return Err(Error::param("n_per_class", "need at least 2 samples per class"));
    }
    BlobGenerator::new(num_classes, dim, separations, seed)?
        .sample(&vec![n_per_class; num_classes], seed)
}

/// Evenly spaced separations from `lo` to `hi` inclusive.
pub fn linear_separations(num_classes: usize, lo: f64, hi: f64) -> Vec<f64> {
    if num_classes == 1 {
        return vec![lo];
    }
    (0..num_classes)
        .map(|k| lo + (hi - lo) * k as f64 / (num_classes - 1) as f64)
        .collect()
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::param("rate", format!("{rate} outside [0, 1]")));
    }
    Ok(())
}

/// Each sample is independently re-labeled with probability `rate`, drawing
/// the new label uniformly from all classes (the true class included).
pub fn inject_symmetric(ds: &CleanDataset, rate: f64, seed: u64) -> Result<NoisyDataset> {
    inject_symmetric_with(ds, rate, false, seed)
}

/// Symmetric noise; `exclude_true` draws replacements from the other K-1
/// classes only.
pub fn inject_symmetric_with(
    ds: &CleanDataset,
    rate: f64,
    exclude_true: bool,
    seed: u64,
) -> Result<NoisyDataset> {
    check_rate(rate)?;
    let k = ds.num_classes();
    let mut rng = rng::seeded(seed, stream::NOISE);
    let observed = ds
        .true_labels()
        .iter()
        .map(|&y| {
            let flip = rng.random::<f64>() < rate;
            if !flip {
                y
            } else if exclude_true {
                let r = rng.random_range(0..k - 1);
                if r >= y {
                    r + 1
                } else {
                    r
                }
            } else {
                rng.random_range(0..k)
            }
        })
        .collect();
    Ok(NoisyDataset::from_observed(
        ds.clone(),
        observed,
        NoiseKind::Symmetric,
        rate,
    ))
}

/// Pairwise flips `0→1, 2→3, …` over half the classes; the rest stay clean.
pub fn default_pair_map(num_classes: usize) -> BTreeMap<usize, usize> {
    (0..num_classes)
        .step_by(2)
        .filter(|c| c + 1 < num_classes)
        .map(|c| (c, c + 1))
        .collect()
}

/// Flips over the same half of the classes as [`default_pair_map`], but
/// each source class goes to the class whose center is closest to its own,
/// so noisy labels land on a confusable class.
pub fn nearest_pair_map(centers: &[Vec<f64>]) -> BTreeMap<usize, usize> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    default_pair_map(centers.len())
        .into_keys()
        .map(|c| {
            let to = (0..centers.len())
                .filter(|&j| j != c)
                .min_by(|&a, &b| {
                    dist(&centers[c], &centers[a]).total_cmp(&dist(&centers[c], &centers[b]))
                })
                .expect("at least two classes");
            (c, to)
        })
        .collect()
}

/// Samples whose true class is in the map's domain flip to the mapped class
/// with probability `rate`; every other class stays clean.
pub fn inject_asymmetric(
    ds: &CleanDataset,
    rate: f64,
    class_map: &BTreeMap<usize, usize>,
    seed: u64,
) -> Result<NoisyDataset> {
    check_rate(rate)?;
    let k = ds.num_classes();
    for (&from, &to) in class_map {
        if from >= k || to >= k {
            return Err(Error::param(
                "class_map",
                format!("{from}->{to} references a class outside [0, {k})"),
            ));
        }
        if from == to {
            return Err(Error::param(
                "class_map",
                format!("class {from} maps to itself"),
            ));
        }
    }
    if class_map.len() >= k {
        return Err(Error::param(
            "class_map",
            "domain must be a strict subset of the classes",
        ));
    }
    let mut rng = rng::seeded(seed, stream::NOISE);
    let observed = ds
        .true_labels()
        .iter()
        .map(|&y| match class_map.get(&y) {
            Some(&to) if rng.random::<f64>() < rate => to,
            _ => y,
        })
        .collect();
    Ok(NoisyDataset::from_observed(
        ds.clone(),
        observed,
        NoiseKind::Asymmetric,
        rate,
    ))
}

/// Reads `f0,...,f{D-1},label:K` CSV (header row declares the class count in
/// the last column; `#` starts a comment line).
pub fn load_csv(path: impl AsRef<Path>) -> Result<CleanDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_reader(text.as_bytes());

    let row_err = |row: usize, reason: String| Error::Row {
        path: path.to_path_buf(),
        row,
        reason,
    };
    let headers = match reader.headers() {
        Ok(h) if !h.is_empty() && !(h.len() == 1 && h[0].is_empty()) => h.clone(),
        Ok(_) => return Err(Error::NoSamples { path: path.to_path_buf() }),
        Err(e) => return Err(row_err(1, e.to_string())),
    };
    if headers.len() < 2 {
        return Err(row_err(1, "need at least one feature column and a label column".into()));
    }
    let label_col = &headers[headers.len() - 1];
    let num_classes: usize = label_col
        .strip_prefix("label:")
        .and_then(|k| k.trim().parse().ok())
        .ok_or_else(|| {
            row_err(
                1,
                format!("last header column must be `label:K`, found `{label_col}`"),
            )
        })?;
    let dim = headers.len() - 1;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            row_err(row, e.to_string())
        })?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != dim + 1 {
            return Err(row_err(
                row,
                format!("expected {} columns, found {}", dim + 1, record.len()),
            ));
        }
        for cell in record.iter().take(dim) {
            let v: f64 = cell
                .parse()
                .map_err(|_| row_err(row, format!("non-numeric cell `{cell}`")))?;
            if !v.is_finite() {
                return Err(row_err(row, format!("non-finite cell `{cell}`")));
            }
            features.push(v);
        }
        let raw = &record[dim];
        let label: usize = raw
            .parse()
            .map_err(|_| row_err(row, format!("label `{raw}` is not a class index")))?;
        if label >= num_classes {
            return Err(row_err(
                row,
                format!("label {label} outside [0, {num_classes})"),
            ));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::NoSamples { path: path.to_path_buf() });
    }
    CleanDataset::new(features, dim, labels, num_classes, None)
}
