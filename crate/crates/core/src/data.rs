//! Datasets, synthetic generation, CSV ingestion, augmentation and
//! multi-view batch assembly.
//!
//! Samples are feature vectors (pre-extracted embeddings). Each sample is
//! tagged `labeled`, `unlabeled` or `test`. Labeled samples only ever carry
//! seen-class labels, the unlabeled pool mixes seen and novel classes, and the
//! test split keeps ground truth for evaluation.
//!
//! On disk a dataset is a CSV file with header `id,split,label,f0,...,f{D-1}`
//! plus a companion metadata file next to it (same stem, `.meta` extension)
//! holding `K=<int>` and `seen_classes=<comma list>` lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Label value meaning "no label".
pub const SENTINEL: i64 = -1;

/// Fraction of each class held out as the test split by the synthetic generator.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "labeled" => Some(Split::Labeled),
            "unlabeled" => Some(Split::Unlabeled),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Immutable feature-vector dataset with a seen/novel class partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    ids: Vec<String>,
    features: Array2<f64>,
    labels: Vec<i64>,
    splits: Vec<Split>,
    num_classes: usize,
    seen_classes: Vec<usize>,
    novel_classes: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset, checking every split/label invariant.
    ///
    /// `seen_classes` may be given in any order; it is stored sorted. The novel
    /// classes are its complement in `0..num_classes`.
    pub fn new(
        ids: Vec<String>,
        features: Array2<f64>,
        labels: Vec<i64>,
        splits: Vec<Split>,
        num_classes: usize,
        seen_classes: Vec<usize>,
    ) -> Result<Self> {
        let n = features.nrows();
        if ids.len() != n || labels.len() != n || splits.len() != n {
            return Err(Error::InvalidInput(format!(
                "dataset columns disagree in length: {} features, {} ids, {} labels, {} splits",
                n,
                ids.len(),
                labels.len(),
                splits.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least two classes, got K={num_classes}"
            )));
        }
        let mut seen = seen_classes;
        seen.sort_unstable();
        seen.dedup();
        if let Some(&c) = seen.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "seen class {c} outside 0..{num_classes}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(
                "features contain non-finite values".into(),
            ));
        }
        let novel: Vec<usize> = (0..num_classes).filter(|c| !seen.contains(c)).collect();
        let ds = Self {
            ids,
            features,
            labels,
            splits,
            num_classes,
            seen_classes: seen,
            novel_classes: novel,
        };
        for i in 0..n {
            ds.check_sample(i).map_err(Error::InvalidInput)?;
        }
        Ok(ds)
    }

    fn check_sample(&self, i: usize) -> std::result::Result<(), String> {
        let label = self.labels[i];
        let id = &self.ids[i];
        match self.splits[i] {
            Split::Labeled => {
                if label == SENTINEL {
                    return Err(format!("labeled sample {id} has no label"));
                }
                if label < 0 || !self.is_seen(label as usize) {
                    return Err(format!(
                        "labeled sample {id} has label {label}, which is not a seen class {:?}",
                        self.seen_classes
                    ));
                }
            }
            Split::Unlabeled => {
                if label != SENTINEL {
                    return Err(format!(
                        "unlabeled sample {id} carries label {label}; use {SENTINEL}"
                    ));
                }
            }
            Split::Test => {
                if label < 0 || label as usize >= self.num_classes {
                    return Err(format!(
                        "test sample {id} needs a ground-truth label in 0..{}, got {label}",
                        self.num_classes
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen_classes
    }

    pub fn novel_classes(&self) -> &[usize] {
        &self.novel_classes
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen_classes.binary_search(&class).is_ok()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Number of labeled samples.
    pub fn n_labeled(&self) -> usize {
        self.splits.iter().filter(|&&s| s == Split::Labeled).count()
    }

    /// Number of unlabeled samples.
    pub fn n_unlabeled(&self) -> usize {
        self.splits
            .iter()
            .filter(|&&s| s == Split::Unlabeled)
            .count()
    }

    /// Rows of the given split stacked into a matrix, in dataset order.
    pub fn select_rows(&self, indices: &[usize]) -> Array2<f64> {
        self.features.select(ndarray::Axis(0), indices)
    }

    /// Writes the CSV file and its companion metadata file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("id,split,label");
        for j in 0..self.dim() {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(
                out,
                "{},{},{}",
                self.ids[i],
                self.splits[i].as_str(),
                self.labels[i]
            );
            for v in self.features.row(i) {
                // `Display` for f64 prints the shortest string that parses back exactly.
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))?;

        let meta_path = meta_path_for(path);
        let seen: Vec<String> = self.seen_classes.iter().map(|c| c.to_string()).collect();
        let meta = format!("K={}\nseen_classes={}\n", self.num_classes, seen.join(","));
        fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
    }
}

/// Location of the metadata file that accompanies a dataset CSV.
pub fn meta_path_for(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta")
}

fn load_meta(path: &Path) -> Result<(usize, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut k = None;
    let mut seen = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno as u64 + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse(path, line_no, format!("expected key=value, got {line:?}"))
        })?;
        match key.trim() {
            "K" => {
                let v = value.trim().parse::<usize>().map_err(|e| {
                    Error::parse(path, line_no, format!("bad K value {value:?}: {e}"))
                })?;
                k = Some(v);
            }
            "seen_classes" => {
                let mut list = Vec::new();
                for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    list.push(item.parse::<usize>().map_err(|e| {
                        Error::parse(path, line_no, format!("bad seen class {item:?}: {e}"))
                    })?);
                }
                seen = Some(list);
            }
            other => {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("unknown key {other:?}"),
                ));
            }
        }
    }
    let k = k.ok_or_else(|| Error::parse(path, 0, "missing K"))?;
    let seen = seen.ok_or_else(|| Error::parse(path, 0, "missing seen_classes"))?;
    Ok((k, seen))
}

/// Loads a dataset CSV and its metadata companion, enforcing every invariant.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (num_classes, seen_classes) = load_meta(&meta_path_for(path))?;
    if num_classes < 2 {
        return Err(Error::parse(
            meta_path_for(path),
            0,
            format!("K must be at least 2, got {num_classes}"),
        ));
    }
    if let Some(c) = seen_classes.iter().find(|&&c| c >= num_classes) {
        return Err(Error::parse(
            meta_path_for(path),
            0,
            format!("seen class {c} outside 0..{num_classes}"),
        ));
    }

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::parse(path, 1, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    if header.len() < 4 || &header[0] != "id" || &header[1] != "split" || &header[2] != "label" {
        return Err(Error::parse(
            path,
            1,
            "header must start with id,split,label followed by at least one feature column",
        ));
    }
    let dim = header.len() - 3;
    for (j, name) in header.iter().skip(3).enumerate() {
        if name != format!("f{j}") {
            return Err(Error::parse(
                path,
                1,
                format!("feature column {j} is named {name:?}, expected \"f{j}\""),
            ));
        }
    }

    let is_seen = |c: usize| seen_classes.contains(&c);
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 3 {
            return Err(Error::parse(
                path,
                line,
                format!("expected {} fields, found {}", dim + 3, record.len()),
            ));
        }
        let split = Split::parse(&record[1])
            .ok_or_else(|| Error::parse(path, line, format!("unknown split {:?}", &record[1])))?;
        let label: i64 = record[2]
            .parse()
            .map_err(|e| Error::parse(path, line, format!("bad label {:?}: {e}", &record[2])))?;
        match split {
            Split::Labeled if label == SENTINEL => {
                return Err(Error::parse(
                    path,
                    line,
                    "labeled sample has sentinel label -1",
                ));
            }
            Split::Labeled if label < 0 || !is_seen(label as usize) => {
                return Err(Error::parse(
                    path,
                    line,
                    format!("labeled sample has label {label}, which is not a seen class"),
                ));
            }
            Split::Unlabeled if label != SENTINEL => {
                return Err(Error::parse(
                    path,
                    line,
                    format!("unlabeled sample carries label {label}; expected -1"),
                ));
            }
            Split::Test if label < 0 || label as usize >= num_classes => {
                return Err(Error::parse(
                    path,
                    line,
                    format!("test sample needs a label in 0..{num_classes}, got {label}"),
                ));
            }
            _ => {}
        }
        for (j, field) in record.iter().skip(3).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|e| Error::parse(path, line, format!("feature f{j} = {field:?}: {e}")))?;
            if !v.is_finite() {
                return Err(Error::parse(
                    path,
                    line,
                    format!("feature f{j} is not finite"),
                ));
            }
            values.push(v);
        }
        ids.push(record[0].to_string());
        labels.push(label);
        splits.push(split);
    }
    let n = ids.len();
    let features = Array2::from_shape_vec((n, dim), values)
        .map_err(|e| Error::parse(path, 0, e.to_string()))?;
    Dataset::new(ids, features, labels, splits, num_classes, seen_classes)
}

/// Parameters of the Gaussian-cluster surrogate benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub seen_fraction: f64,
    /// Fraction of each seen class's non-test samples that are labeled.
    pub labeled_fraction: f64,
    /// Mean distance between class centers, in units of the within-class std.
    pub cluster_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            dim: 16,
            samples_per_class: 250,
            seen_fraction: 0.5,
            labeled_fraction: 0.5,
            cluster_separation: 4.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "synthetic K must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("synthetic dimension must be positive".into()));
        }
        if !(self.seen_fraction > 0.0 && self.seen_fraction < 1.0) {
            return Err(Error::Config(format!(
                "seen_fraction must lie in (0, 1), got {}",
                self.seen_fraction
            )));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return Err(Error::Config(format!(
                "cluster_separation must be positive, got {}",
                self.cluster_separation
            )));
        }
        let (n_test, n_labeled) = self.per_class_counts();
        if n_test == 0 || n_test >= self.samples_per_class || n_labeled == 0 {
            return Err(Error::Config(format!(
                "samples_per_class = {} is too small to populate test and labeled splits",
                self.samples_per_class
            )));
        }
        Ok(())
    }

    /// Test samples per class and labeled samples per seen class.
    pub fn per_class_counts(&self) -> (usize, usize) {
        let n_test = (self.samples_per_class as f64 * TEST_FRACTION).round() as usize;
        let non_test = self.samples_per_class.saturating_sub(n_test);
        let n_labeled = (non_test as f64 * self.labeled_fraction).round() as usize;
        (n_test, n_labeled.min(non_test))
    }

    pub fn num_seen(&self) -> usize {
        ((self.num_classes as f64 * self.seen_fraction).round() as usize)
            .clamp(1, self.num_classes - 1)
    }
}

/// Isotropic Gaussian clusters with unit within-class std.
///
/// Class centers are drawn from a standard normal and then rescaled so that
/// their mean pairwise distance equals `cluster_separation` exactly.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.num_classes;
    let d = cfg.dim;

    let mut centers = Array2::<f64>::zeros((k, d));
    centers.mapv_inplace(|_| rng.sample(StandardNormal));
    let mut dist_sum = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            let diff = &centers.row(a) - &centers.row(b);
            dist_sum += diff.dot(&diff).sqrt();
        }
    }
    let mean_dist = dist_sum / (k * (k - 1) / 2) as f64;
    centers *= cfg.cluster_separation / mean_dist;

    let mut classes: Vec<usize> = (0..k).collect();
    classes.shuffle(&mut rng);
    let mut seen: Vec<usize> = classes[..cfg.num_seen()].to_vec();
    seen.sort_unstable();

    let (n_test, n_labeled) = cfg.per_class_counts();
    let n = k * cfg.samples_per_class;
    let mut features = Array2::<f64>::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    let mut row = 0;
    for class in 0..k {
        let is_seen = seen.contains(&class);
        for s in 0..cfg.samples_per_class {
            for j in 0..d {
                let noise: f64 = rng.sample(StandardNormal);
                features[[row, j]] = centers[[class, j]] + noise;
            }
            let split = if s < n_test {
                Split::Test
            } else if is_seen && s < n_test + n_labeled {
                Split::Labeled
            } else {
                Split::Unlabeled
            };
            labels.push(match split {
                Split::Unlabeled => SENTINEL,
                _ => class as i64,
            });
            splits.push(split);
            row += 1;
        }
    }
    let ids = (0..n).map(|i| i.to_string()).collect();
    Dataset::new(ids, features, labels, splits, k, seen)
}

/// Ground-truth labels are dropped from unlabeled samples; the synthetic
/// generator still knows them, so expose them for diagnostics.
pub fn synthetic_hidden_labels(cfg: &SyntheticConfig) -> Vec<usize> {
    (0..cfg.num_classes)
        .flat_map(|c| std::iter::repeat_n(c, cfg.samples_per_class))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strength {
    Weak,
    Strong,
}

/// Feature-space augmentation: Gaussian jitter for the weak view, jitter plus
/// random coordinate masking for the strong view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_sigma: 0.1,
            strong_sigma: 0.25,
            mask_prob: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weak_sigma >= 0.0 && self.strong_sigma >= 0.0) {
            return Err(Error::Config(
                "augmentation noise must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!(
                "mask probability must lie in [0, 1], got {}",
                self.mask_prob
            )));
        }
        Ok(())
    }
}

pub fn augment<R: Rng + ?Sized>(
    x: ArrayView1<'_, f64>,
    strength: Strength,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Vec<f64> {
    let sigma = match strength {
        Strength::Weak => cfg.weak_sigma,
        Strength::Strong => cfg.strong_sigma,
    };
    let mut out: Vec<f64> = x.to_vec();
    if sigma > 0.0 {
        for v in out.iter_mut() {
            let noise: f64 = StandardNormal.sample(rng);
            *v += sigma * noise;
        }
    }
    if strength == Strength::Strong && cfg.mask_prob > 0.0 {
        for v in out.iter_mut() {
            if rng.random_bool(cfg.mask_prob) {
                *v = 0.0;
            }
        }
    }
    out
}

/// One minibatch with a weak and a strong view per sample.
///
/// Labeled samples come first. The confidence partition is empty until
/// [`crate::objective::partition_batch`] fills it from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewBatch {
    /// Dataset row of each sample, when drawn from a dataset.
    pub indices: Vec<usize>,
    pub weak: Array2<f64>,
    pub strong: Array2<f64>,
    /// Ground-truth label for labeled samples, [`SENTINEL`] otherwise.
    pub labels: Vec<i64>,
    confident: Vec<bool>,
    pseudo_labels: Vec<Option<usize>>,
}

impl MultiViewBatch {
    pub fn new(weak: Array2<f64>, strong: Array2<f64>, labels: Vec<i64>) -> Result<Self> {
        if weak.dim() != strong.dim() {
            return Err(Error::Shape(format!(
                "weak views {:?} and strong views {:?} differ",
                weak.dim(),
                strong.dim()
            )));
        }
        if labels.len() != weak.nrows() {
            return Err(Error::Shape(format!(
                "{} labels for {} samples",
                labels.len(),
                weak.nrows()
            )));
        }
        if labels.iter().any(|&l| l < SENTINEL) {
            return Err(Error::InvalidInput(
                "negative label other than the sentinel".into(),
            ));
        }
        let indices = (0..labels.len()).collect();
        Ok(Self {
            indices,
            weak,
            strong,
            labels,
            confident: Vec::new(),
            pseudo_labels: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.labels[i] != SENTINEL
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.is_labeled(i).then(|| self.labels[i] as usize)
    }

    pub fn n_labeled(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_labeled(i)).count()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.len() - self.n_labeled()
    }

    pub fn is_partitioned(&self) -> bool {
        self.confident.len() == self.len()
    }

    /// Installs the confidence partition. `confident[i]` may only be set for
    /// unlabeled samples, and each confident sample needs a pseudo-label.
    pub fn set_partition(
        &mut self,
        confident: Vec<bool>,
        pseudo_labels: Vec<Option<usize>>,
    ) -> Result<()> {
        if confident.len() != self.len() || pseudo_labels.len() != self.len() {
            return Err(Error::Shape(
                "partition length differs from batch size".into(),
            ));
        }
        for i in 0..self.len() {
            if confident[i] && self.is_labeled(i) {
                return Err(Error::InvalidInput(format!(
                    "sample {i} is labeled and cannot be marked confident"
                )));
            }
            if confident[i] && pseudo_labels[i].is_none() {
                return Err(Error::InvalidInput(format!(
                    "confident sample {i} has no pseudo-label"
                )));
            }
        }
        self.confident = confident;
        self.pseudo_labels = pseudo_labels;
        Ok(())
    }

    pub fn confident(&self) -> &[bool] {
        &self.confident
    }

    pub fn pseudo_labels(&self) -> &[Option<usize>] {
        &self.pseudo_labels
    }

    pub fn is_confident(&self, i: usize) -> bool {
        self.confident.get(i).copied().unwrap_or(false)
    }

    /// Labeled samples and confident unlabeled samples with their targets
    /// (ground truth or pseudo-label), in batch order.
    pub fn confident_set(&self) -> Vec<(usize, usize)> {
        (0..self.len())
            .filter_map(|i| match self.label(i) {
                Some(y) => Some((i, y)),
                None if self.is_confident(i) => self.pseudo_labels[i].map(|p| (i, p)),
                None => None,
            })
            .collect()
    }

    /// Unlabeled samples that are not confident, in batch order.
    pub fn low_confidence_set(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.is_labeled(i) && !self.is_confident(i))
            .collect()
    }
}

/// Draws multi-view batches from a dataset.
///
/// An epoch is one pass over the unlabeled pool without replacement. The
/// labeled pool is consumed as a separate stream of reshuffled permutations.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    labeled_queue: Vec<usize>,
    labeled_per_batch: usize,
    unlabeled_per_batch: usize,
    augment: AugmentConfig,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(
        ds: &Dataset,
        batch_size: usize,
        labeled_fraction_in_batch: f64,
        augment: AugmentConfig,
        seed: u64,
    ) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {batch_size}"
            )));
        }
        if !(labeled_fraction_in_batch > 0.0 && labeled_fraction_in_batch < 1.0) {
            return Err(Error::Config(format!(
                "labeled fraction in batch must lie in (0, 1), got {labeled_fraction_in_batch}"
            )));
        }
        augment.validate()?;
        let labeled = ds.indices_of(Split::Labeled);
        let unlabeled = ds.indices_of(Split::Unlabeled);
        if labeled.is_empty() || unlabeled.is_empty() {
            return Err(Error::Config(format!(
                "need labeled and unlabeled samples, found {} and {}",
                labeled.len(),
                unlabeled.len()
            )));
        }
        let labeled_per_batch = ((batch_size as f64 * labeled_fraction_in_batch).round() as usize)
            .clamp(1, batch_size - 1);
        Ok(Self {
            labeled,
            unlabeled,
            labeled_queue: Vec::new(),
            labeled_per_batch,
            unlabeled_per_batch: batch_size - labeled_per_batch,
            augment,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn labeled_per_batch(&self) -> usize {
        self.labeled_per_batch
    }

    pub fn unlabeled_per_batch(&self) -> usize {
        self.unlabeled_per_batch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.unlabeled.len().div_ceil(self.unlabeled_per_batch)
    }

    fn next_labeled(&mut self) -> usize {
        if self.labeled_queue.is_empty() {
            let mut perm = self.labeled.clone();
            perm.shuffle(&mut self.rng);
            perm.reverse();
            self.labeled_queue = perm;
        }
        self.labeled_queue.pop().expect("labeled pool is non-empty")
    }

    /// Sample indices for every batch of the next epoch, labeled rows first.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let mut order = self.unlabeled.clone();
        order.shuffle(&mut self.rng);
        let chunks: Vec<Vec<usize>> = order
            .chunks(self.unlabeled_per_batch)
            .map(<[usize]>::to_vec)
            .collect();
        chunks
            .into_iter()
            .map(|unlabeled| {
                let mut batch: Vec<usize> = (0..self.labeled_per_batch)
                    .map(|_| self.next_labeled())
                    .collect();
                batch.extend(unlabeled);
                batch
            })
            .collect()
    }

    /// Augments both views of the given samples.
    pub fn assemble(&mut self, ds: &Dataset, indices: &[usize]) -> MultiViewBatch {
        let d = ds.dim();
        let b = indices.len();
        let mut weak = Array2::zeros((b, d));
        let mut strong = Array2::zeros((b, d));
        let mut labels = Vec::with_capacity(b);
        for (r, &i) in indices.iter().enumerate() {
            let x = ds.feature(i);
            let w = augment(x, Strength::Weak, &self.augment, &mut self.rng);
            let s = augment(x, Strength::Strong, &self.augment, &mut self.rng);
            weak.row_mut(r).assign(&ArrayView1::from(&w));
            strong.row_mut(r).assign(&ArrayView1::from(&s));
            labels.push(match ds.splits()[i] {
                Split::Labeled => ds.labels()[i],
                _ => SENTINEL,
            });
        }
        MultiViewBatch {
            indices: indices.to_vec(),
            weak,
            strong,
            labels,
            confident: Vec::new(),
            pseudo_labels: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::collections::HashSet;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            num_classes: 10,
            dim: 4,
            samples_per_class: 100,
            seen_fraction: 0.5,
            labeled_fraction: 0.1,
            cluster_separation: 4.0,
            seed: 7,
        }
    }

    #[test]
    fn seen_novel_split_arithmetic() {
        let cfg = SyntheticConfig {
            num_classes: 8,
            ..small_cfg()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.seen_classes().len(), 4);
        assert_eq!(ds.novel_classes().len(), 4);
    }

    #[test]
    fn labeled_count_per_seen_class() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        for &c in ds.seen_classes() {
            let n = ds
                .indices_of(Split::Labeled)
                .into_iter()
                .filter(|&i| ds.labels()[i] == c as i64)
                .count();
            assert_eq!(n, 8);
        }
        for c in 0..10 {
            let n_test = ds
                .indices_of(Split::Test)
                .into_iter()
                .filter(|&i| ds.labels()[i] == c as i64)
                .count();
            assert_eq!(n_test, 20);
        }
        assert_eq!(ds.n_labeled(), 40);
        assert_eq!(ds.n_unlabeled(), 5 * 72 + 5 * 80);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let bits_a: Vec<u64> = a.features().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.features().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn center_separation_matches_config() {
        let cfg = SyntheticConfig {
            samples_per_class: 2000,
            dim: 3,
            num_classes: 3,
            ..small_cfg()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let hidden = synthetic_hidden_labels(&cfg);
        let mut means = Array2::<f64>::zeros((3, 3));
        for (i, &c) in hidden.iter().enumerate() {
            let mut row = means.row_mut(c);
            row += &ds.feature(i);
        }
        means /= 2000.0;
        let mut total = 0.0;
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let diff = &means.row(a) - &means.row(b);
            total += diff.dot(&diff).sqrt();
        }
        assert!(
            (total / 3.0 - 4.0).abs() < 0.15,
            "mean distance {}",
            total / 3.0
        );
    }

    #[test]
    fn too_few_samples_is_a_config_error() {
        let cfg = SyntheticConfig {
            samples_per_class: 2,
            ..small_cfg()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = SyntheticConfig {
            seen_fraction: 1.0,
            ..small_cfg()
        };
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn dataset_rejects_novel_labels_in_labeled_split() {
        let err = Dataset::new(
            vec!["a".into()],
            array![[0.0]],
            vec![1],
            vec![Split::Labeled],
            2,
            vec![0],
        );
        assert!(err.is_err());
    }

    #[test]
    fn augment_zero_noise_is_identity() {
        let x = array![1.0, -2.0, 3.5];
        let cfg = AugmentConfig {
            weak_sigma: 0.0,
            strong_sigma: 0.0,
            mask_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            augment(x.view(), Strength::Weak, &cfg, &mut rng),
            x.to_vec()
        );
        assert_eq!(
            augment(x.view(), Strength::Strong, &cfg, &mut rng),
            x.to_vec()
        );
    }

    #[test]
    fn full_mask_zeroes_strong_view() {
        let x = array![1.0, -2.0, 3.5];
        let cfg = AugmentConfig {
            weak_sigma: 0.0,
            strong_sigma: 0.0,
            mask_prob: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            augment(x.view(), Strength::Strong, &cfg, &mut rng),
            vec![0.0; 3]
        );
    }

    /// `E||N(0, s^2 I_d)|| = s * sqrt(2) * Gamma((d+1)/2) / Gamma(d/2)`, with the
    /// gamma ratio built by the recurrence r(d+1) = (d/2) / r(d), r(1) = 1/sqrt(pi).
    fn chi_mean(sigma: f64, d: usize) -> f64 {
        let mut r = 1.0 / std::f64::consts::PI.sqrt();
        for k in 1..d {
            r = (k as f64 / 2.0) / r;
        }
        sigma * 2f64.sqrt() * r
    }

    #[test]
    fn weak_jitter_norm_matches_chi_mean() {
        let d = 16;
        let cfg = AugmentConfig::default();
        let x = ndarray::Array1::<f64>::linspace(-1.0, 1.0, d);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 10_000;
        let mean: f64 = (0..draws)
            .map(|_| {
                let w = augment(x.view(), Strength::Weak, &cfg, &mut rng);
                w.iter()
                    .zip(x.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / draws as f64;
        let nominal = cfg.weak_sigma * (d as f64).sqrt();
        assert!(
            (mean / nominal - 1.0).abs() < 0.05,
            "mean {mean} vs {nominal}"
        );
        assert!((mean / chi_mean(cfg.weak_sigma, d) - 1.0).abs() < 0.01);
    }

    #[test]
    fn batch_composition() {
        let cfg = SyntheticConfig {
            samples_per_class: 200,
            ..small_cfg()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let mut sampler = BatchSampler::new(&ds, 512, 0.5, AugmentConfig::default(), 3).unwrap();
        let epoch = sampler.next_epoch();
        let batch = sampler.assemble(&ds, &epoch[0]);
        assert_eq!(batch.n_labeled(), 256);
        assert_eq!(batch.n_unlabeled(), 256);
        assert_eq!(batch.weak.dim(), (512, 4));
    }

    #[test]
    fn each_unlabeled_sample_once_per_epoch() {
        // 10 classes * 100 samples, half seen with 10% labeled:
        // unlabeled = 5 * 72 + 5 * 80 = 760. Use a custom pool of exactly 1000.
        let n = 1100;
        let features = Array2::zeros((n, 2));
        let mut labels = vec![0i64; 100];
        labels.extend(std::iter::repeat_n(SENTINEL, 1000));
        let mut splits = vec![Split::Labeled; 100];
        splits.extend(std::iter::repeat_n(Split::Unlabeled, 1000));
        let ids = (0..n).map(|i| i.to_string()).collect();
        let ds = Dataset::new(ids, features, labels, splits, 2, vec![0]).unwrap();
        let mut sampler = BatchSampler::new(&ds, 200, 0.5, AugmentConfig::default(), 5).unwrap();
        assert_eq!(sampler.batches_per_epoch(), 10);
        for _ in 0..2 {
            let epoch = sampler.next_epoch();
            assert_eq!(epoch.len(), 10);
            let mut seen = HashSet::new();
            for batch in &epoch {
                for &i in &batch[100..] {
                    assert!(seen.insert(i), "sample {i} drawn twice");
                }
            }
            assert_eq!(seen.len(), 1000);
        }
    }

    #[test]
    fn sampler_is_deterministic() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let mut a = BatchSampler::new(&ds, 64, 0.5, AugmentConfig::default(), 11).unwrap();
        let mut b = BatchSampler::new(&ds, 64, 0.5, AugmentConfig::default(), 11).unwrap();
        for _ in 0..2 {
            let ea = a.next_epoch();
            let eb = b.next_epoch();
            assert_eq!(ea, eb);
            assert_eq!(a.assemble(&ds, &ea[0]), b.assemble(&ds, &eb[0]));
        }
    }

    #[test]
    fn tiny_batch_is_rejected() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        assert!(matches!(
            BatchSampler::new(&ds, 1, 0.5, AugmentConfig::default(), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partition_invariants_are_enforced() {
        let mut batch = MultiViewBatch::new(
            Array2::zeros((3, 2)),
            Array2::zeros((3, 2)),
            vec![0, SENTINEL, SENTINEL],
        )
        .unwrap();
        assert!(batch
            .set_partition(vec![true, false, false], vec![Some(0), None, None])
            .is_err());
        assert!(batch
            .set_partition(vec![false, true, false], vec![None, None, None])
            .is_err());
        batch
            .set_partition(vec![false, true, false], vec![None, Some(1), Some(0)])
            .unwrap();
        assert_eq!(batch.confident_set(), vec![(0, 0), (1, 1)]);
        assert_eq!(batch.low_confidence_set(), vec![2]);
    }
}
