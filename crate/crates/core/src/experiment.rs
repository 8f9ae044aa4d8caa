//! Experiment orchestration: configuration, the training loop, per-epoch
//! evaluation, hyperparameter sweeps and logit dumps.
//!
//! Configuration files are flat `key = value` lines (`#` starts a comment).
//! See [`ExperimentConfig::set`] for the recognised keys.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, AugmentConfig, BatchSampler, Dataset, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsRecord, OverallMatching};
use crate::model::{Architecture, Model, Sgd, SgdConfig};
use crate::numeric::{self, softmax_into};
use crate::objective::{
    adaptive_margins, estimate_class_distribution, partition_batch, total_loss, Ablation,
    ClassDistribution, Hyperparams, LossTerms, TrainSchedule,
};

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub hyper: Hyperparams,
    /// Hidden width of the head; `None` for a linear head.
    pub hidden: Option<usize>,
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub labeled_fraction_in_batch: f64,
    pub augment: AugmentConfig,
    pub init_seed: u64,
    pub batch_seed: u64,
    pub ablation: Ablation,
    pub overall_matching: OverallMatching,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticConfig::default()),
            hyper: Hyperparams::default(),
            hidden: None,
            sgd: SgdConfig::default(),
            epochs: 200,
            batch_size: 128,
            labeled_fraction_in_batch: 0.5,
            augment: AugmentConfig::default(),
            init_seed: 0,
            batch_seed: 0,
            ablation: Ablation::default(),
            overall_matching: OverallMatching::Pinned,
            out_dir: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key} = {value:?}: expected a boolean"
        ))),
    }
}

impl ExperimentConfig {
    fn synthetic_mut(&mut self, key: &str) -> Result<&mut SyntheticConfig> {
        match &mut self.data {
            DataSource::Synthetic(s) => Ok(s),
            DataSource::File(p) => Err(Error::Config(format!(
                "{key} given but the dataset comes from {}; use exactly one source",
                p.display()
            ))),
        }
    }

    /// Sets every seed (dataset generation, initialization, batching) to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        if let DataSource::Synthetic(s) = &mut self.data {
            s.seed = seed;
        }
        self.init_seed = seed;
        self.batch_seed = seed;
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "data" => {
                self.data = if value == "synthetic" {
                    match &self.data {
                        DataSource::Synthetic(_) => self.data.clone(),
                        DataSource::File(_) => DataSource::Synthetic(SyntheticConfig::default()),
                    }
                } else {
                    if let DataSource::Synthetic(s) = &self.data {
                        let ignoring_seed = SyntheticConfig {
                            seed: SyntheticConfig::default().seed,
                            ..s.clone()
                        };
                        if ignoring_seed != SyntheticConfig::default() {
                            return Err(Error::Config(
                                "synthetic settings given together with a dataset file".into(),
                            ));
                        }
                    }
                    DataSource::File(PathBuf::from(value))
                };
            }
            "synthetic.K" => self.synthetic_mut(key)?.num_classes = parse_value(key, value)?,
            "synthetic.dim" => self.synthetic_mut(key)?.dim = parse_value(key, value)?,
            "synthetic.samples_per_class" => {
                self.synthetic_mut(key)?.samples_per_class = parse_value(key, value)?
            }
            "synthetic.seen_fraction" => {
                self.synthetic_mut(key)?.seen_fraction = parse_value(key, value)?
            }
            "synthetic.labeled_fraction" => {
                self.synthetic_mut(key)?.labeled_fraction = parse_value(key, value)?
            }
            "synthetic.separation" => {
                self.synthetic_mut(key)?.cluster_separation = parse_value(key, value)?
            }
            "data_seed" => self.synthetic_mut(key)?.seed = parse_value(key, value)?,
            "C" => self.hyper.margin_scale = parse_value(key, value)?,
            "tau" => self.hyper.temperature = parse_value(key, value)?,
            "eta1" => self.hyper.pc_weight = parse_value(key, value)?,
            "eta2" => self.hyper.uc_weight = parse_value(key, value)?,
            "lambda_seen" => self.hyper.seen_threshold = parse_value(key, value)?,
            "lambda_novel_base" => self.hyper.novel_threshold_base = parse_value(key, value)?,
            "lambda_novel_ramp" => self.hyper.novel_threshold_ramp = parse_value(key, value)?,
            "normalize_similarity" => self.hyper.normalize_similarity = parse_bool(key, value)?,
            "pi_ema" => self.hyper.distribution_ema = parse_value(key, value)?,
            "hidden" => {
                self.hidden = match value {
                    "none" | "0" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "lr" => self.sgd.lr0 = parse_value(key, value)?,
            "momentum" => self.sgd.momentum = parse_value(key, value)?,
            "weight_decay" => self.sgd.weight_decay = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "labeled_fraction_in_batch" => {
                self.labeled_fraction_in_batch = parse_value(key, value)?
            }
            "aug.weak_sigma" => self.augment.weak_sigma = parse_value(key, value)?,
            "aug.strong_sigma" => self.augment.strong_sigma = parse_value(key, value)?,
            "aug.mask_prob" => self.augment.mask_prob = parse_value(key, value)?,
            "seed" => self.set_seed(parse_value(key, value)?),
            "init_seed" => self.init_seed = parse_value(key, value)?,
            "batch_seed" => self.batch_seed = parse_value(key, value)?,
            "no_am" => self.ablation.no_am = parse_bool(key, value)?,
            "no_pc" => self.ablation.no_pc = parse_bool(key, value)?,
            "no_uc" => self.ablation.no_uc = parse_bool(key, value)?,
            "no_entropy" => self.ablation.no_entropy = parse_bool(key, value)?,
            "overall_matching" => {
                self.overall_matching = match value {
                    "pinned" => OverallMatching::Pinned,
                    "free" => OverallMatching::Free,
                    _ => {
                        return Err(Error::Config(format!(
                            "overall_matching = {value:?}: expected pinned or free"
                        )))
                    }
                }
            }
            "out" => self.out_dir = Some(PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every line of a `key = value` document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every setting as `key = value` lines; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        match &self.data {
            DataSource::Synthetic(syn) => {
                kv("data", "synthetic".into());
                kv("synthetic.K", syn.num_classes.to_string());
                kv("synthetic.dim", syn.dim.to_string());
                kv(
                    "synthetic.samples_per_class",
                    syn.samples_per_class.to_string(),
                );
                kv("synthetic.seen_fraction", syn.seen_fraction.to_string());
                kv(
                    "synthetic.labeled_fraction",
                    syn.labeled_fraction.to_string(),
                );
                kv("synthetic.separation", syn.cluster_separation.to_string());
                kv("data_seed", syn.seed.to_string());
            }
            DataSource::File(p) => kv("data", p.display().to_string()),
        }
        let h = &self.hyper;
        kv("C", h.margin_scale.to_string());
        kv("tau", h.temperature.to_string());
        kv("eta1", h.pc_weight.to_string());
        kv("eta2", h.uc_weight.to_string());
        kv("lambda_seen", h.seen_threshold.to_string());
        kv("lambda_novel_base", h.novel_threshold_base.to_string());
        kv("lambda_novel_ramp", h.novel_threshold_ramp.to_string());
        kv("normalize_similarity", h.normalize_similarity.to_string());
        kv("pi_ema", h.distribution_ema.to_string());
        kv(
            "hidden",
            self.hidden
                .map_or_else(|| "none".to_string(), |w| w.to_string()),
        );
        kv("lr", self.sgd.lr0.to_string());
        kv("momentum", self.sgd.momentum.to_string());
        kv("weight_decay", self.sgd.weight_decay.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv(
            "labeled_fraction_in_batch",
            self.labeled_fraction_in_batch.to_string(),
        );
        kv("aug.weak_sigma", self.augment.weak_sigma.to_string());
        kv("aug.strong_sigma", self.augment.strong_sigma.to_string());
        kv("aug.mask_prob", self.augment.mask_prob.to_string());
        kv("init_seed", self.init_seed.to_string());
        kv("batch_seed", self.batch_seed.to_string());
        kv("no_am", self.ablation.no_am.to_string());
        kv("no_pc", self.ablation.no_pc.to_string());
        kv("no_uc", self.ablation.no_uc.to_string());
        kv("no_entropy", self.ablation.no_entropy.to_string());
        kv(
            "overall_matching",
            match self.overall_matching {
                OverallMatching::Pinned => "pinned",
                OverallMatching::Free => "free",
            }
            .into(),
        );
        if let Some(out) = &self.out_dir {
            kv("out", out.display().to_string());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.sgd.validate()?;
        self.augment.validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synthetic(s) => data::generate_synthetic(s),
            DataSource::File(p) => data::load_dataset(p),
        }
    }
}

/// Test-split scores of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub seen_acc: Option<f64>,
    pub novel_acc: Option<f64>,
    pub all_acc: Option<f64>,
    pub nmi_novel: Option<f64>,
}

pub fn predict(model: &Model, x: &Array2<f64>) -> Result<Vec<usize>> {
    let logits = model.forward(x.view())?;
    Ok(logits
        .outer_iter()
        .map(|row| numeric::argmax(row.as_slice().expect("standard layout")))
        .collect())
}

pub fn evaluate(model: &Model, ds: &Dataset, matching: OverallMatching) -> Result<Scores> {
    let test = ds.indices_of(Split::Test);
    let preds = predict(model, &ds.select_rows(&test))?;
    let targets: Vec<usize> = test.iter().map(|&i| ds.labels()[i] as usize).collect();
    let (novel_preds, novel_targets): (Vec<usize>, Vec<usize>) = preds
        .iter()
        .zip(&targets)
        .filter(|(_, t)| ds.novel_classes().contains(t))
        .map(|(&p, &t)| (p, t))
        .unzip();
    let nmi_novel = if novel_targets.is_empty() {
        None
    } else {
        Some(eval::nmi(&novel_preds, &novel_targets)?)
    };
    Ok(Scores {
        seen_acc: eval::seen_accuracy(&preds, &targets, ds.seen_classes())?,
        novel_acc: eval::novel_accuracy(&preds, &targets, ds.novel_classes())?,
        all_acc: eval::overall_accuracy(
            &preds,
            &targets,
            ds.seen_classes(),
            ds.novel_classes(),
            matching,
        )?,
        nmi_novel,
    })
}

fn softmax_rows(logits: &Array2<f64>) -> Vec<Vec<f64>> {
    logits
        .outer_iter()
        .map(|row| {
            let mut p = vec![0.0; row.len()];
            softmax_into(row.as_slice().expect("standard layout"), &mut p);
            p
        })
        .collect()
}

/// Class-distribution estimate over the whole training pool (clean features)
/// using the thresholds in effect at `sched`.
pub fn pool_distribution(
    model: &Model,
    ds: &Dataset,
    sched: TrainSchedule,
    hp: &Hyperparams,
) -> Result<ClassDistribution> {
    let labeled =
        softmax_rows(&model.forward(ds.select_rows(&ds.indices_of(Split::Labeled)).view())?);
    let unlabeled =
        softmax_rows(&model.forward(ds.select_rows(&ds.indices_of(Split::Unlabeled)).view())?);
    Ok(estimate_class_distribution(
        ds.num_classes(),
        &labeled,
        &unlabeled,
        ds.seen_classes(),
        sched,
        hp,
    ))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    /// Epoch 0 (before training) followed by one record per epoch.
    pub records: Vec<MetricsRecord>,
    /// Training-pool class-distribution estimate at each recorded epoch.
    pub pace: Vec<ClassDistribution>,
}

#[derive(Debug, Default, Clone, Copy)]
struct TermSums {
    terms: LossTerms,
    total: f64,
    count: usize,
}

impl TermSums {
    fn add(&mut self, terms: &LossTerms, total: f64) {
        self.terms.am += terms.am;
        self.terms.pc += terms.pc;
        self.terms.uc += terms.uc;
        self.terms.entropy += terms.entropy;
        self.total += total;
        self.count += 1;
    }

    fn mean(&self) -> (LossTerms, f64) {
        if self.count == 0 {
            return (LossTerms::default(), 0.0);
        }
        let n = self.count as f64;
        (
            LossTerms {
                am: self.terms.am / n,
                pc: self.terms.pc / n,
                uc: self.terms.uc / n,
                entropy: self.terms.entropy / n,
            },
            self.total / n,
        )
    }
}

fn record(
    epoch: usize,
    model: &Model,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    sched: TrainSchedule,
    sums: &TermSums,
) -> Result<(MetricsRecord, ClassDistribution)> {
    let scores = evaluate(model, ds, cfg.overall_matching)?;
    let dist = pool_distribution(model, ds, sched, &cfg.hyper)?;
    let (terms, total) = sums.mean();
    let rec = MetricsRecord {
        epoch,
        seen_acc: scores.seen_acc,
        novel_acc: scores.novel_acc,
        all_acc: scores.all_acc,
        nmi_novel: scores.nmi_novel,
        kl_to_prior: dist.kl_to_prior(),
        loss_am: terms.am,
        loss_pc: terms.pc,
        loss_uc: terms.uc,
        loss_entropy: terms.entropy,
        loss_total: total,
    };
    rec.validate()?;
    Ok((rec, dist))
}

/// Runs the full training loop in memory.
///
/// Each iteration: augment both views, forward, estimate the class
/// distribution from weak-view predictions, derive margins, partition the
/// batch by confidence, evaluate the objective, backpropagate through both
/// views and take one SGD step. The test split is evaluated after every epoch.
pub fn train(cfg: &ExperimentConfig, ds: &Dataset) -> Result<TrainOutput> {
    cfg.validate()?;
    let k = ds.num_classes();
    let arch = match cfg.hidden {
        None => Architecture::linear(ds.dim(), k),
        Some(h) => Architecture::mlp(ds.dim(), h, k),
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut model = Model::init(arch, &mut init_rng);
    let mut sampler = BatchSampler::new(
        ds,
        cfg.batch_size,
        cfg.labeled_fraction_in_batch,
        cfg.augment,
        cfg.batch_seed,
    )?;
    let total_steps = cfg.epochs * sampler.batches_per_epoch();
    let schedule_len = total_steps.max(1);
    let mut opt = Sgd::new(cfg.sgd, arch, total_steps);
    let hp = &cfg.hyper;

    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let mut pace = Vec::with_capacity(cfg.epochs + 1);
    let (rec, dist) = record(
        0,
        &model,
        ds,
        cfg,
        TrainSchedule::new(0, schedule_len)?,
        &TermSums::default(),
    )?;
    records.push(rec);
    pace.push(dist);

    let mut step = 0usize;
    let mut smoothed: Option<ClassDistribution> = None;
    for epoch in 1..=cfg.epochs {
        let mut sums = TermSums::default();
        for indices in sampler.next_epoch() {
            let mut batch = sampler.assemble(ds, &indices);
            let sched = TrainSchedule::new(step, schedule_len)?;
            let weak_logits = model.forward(batch.weak.view())?;
            let strong_logits = model.forward(batch.strong.view())?;

            let probs = softmax_rows(&weak_logits);
            let (labeled, unlabeled): (Vec<_>, Vec<_>) = probs
                .into_iter()
                .enumerate()
                .partition(|(i, _)| batch.is_labeled(*i));
            let labeled: Vec<Vec<f64>> = labeled.into_iter().map(|(_, p)| p).collect();
            let unlabeled: Vec<Vec<f64>> = unlabeled.into_iter().map(|(_, p)| p).collect();
            let mut dist =
                estimate_class_distribution(k, &labeled, &unlabeled, ds.seen_classes(), sched, hp);
            if let Some(prev) = &smoothed {
                dist = dist.smoothed(prev, hp.distribution_ema);
            }
            let margins = adaptive_margins(&dist, hp.margin_scale);
            smoothed = Some(dist);

            partition_batch(&mut batch, weak_logits.view(), ds.seen_classes(), sched, hp)?;
            let loss = total_loss(
                &batch,
                weak_logits.view(),
                strong_logits.view(),
                &margins,
                hp,
                cfg.ablation,
            )?;
            if !loss.value.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            let mut grads = model.backward(batch.weak.view(), loss.grad.weak.view())?;
            grads.add_scaled(
                1.0,
                &model.backward(batch.strong.view(), loss.grad.strong.view())?,
            );
            opt.step(&mut model, &grads);
            sums.add(&loss.terms, loss.value);
            step += 1;
        }
        let (rec, dist) = record(
            epoch,
            &model,
            ds,
            cfg,
            TrainSchedule::new(step, schedule_len)?,
            &sums,
        )?;
        records.push(rec);
        pace.push(dist);
    }
    Ok(TrainOutput {
        model,
        records,
        pace,
    })
}

pub fn metrics_jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_record: MetricsRecord,
    pub records: Vec<MetricsRecord>,
    pub out_dir: Option<PathBuf>,
}

/// Trains and, when an output directory is configured, writes
/// `metrics.jsonl`, `summary.csv`, `checkpoint.bin` and `config.echo`.
/// Synthetic datasets are also written as `dataset.csv` / `dataset.meta`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let ds = cfg.load_data()?;
    let out = train(cfg, &ds)?;
    let final_record = out
        .records
        .last()
        .expect("epoch 0 is always recorded")
        .clone();
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("metrics.jsonl"), metrics_jsonl(&out.records)?)?;
        let f = &final_record;
        let summary = format!(
            "epoch,seen_acc,novel_acc,all_acc,nmi_novel,kl_to_prior\n{},{},{},{},{},{}\n",
            f.epoch,
            opt_cell(f.seen_acc),
            opt_cell(f.novel_acc),
            opt_cell(f.all_acc),
            opt_cell(f.nmi_novel),
            f.kl_to_prior
        );
        write_file(&dir.join("summary.csv"), summary)?;
        out.model.save(&dir.join("checkpoint.bin"))?;
        write_file(&dir.join("config.echo"), cfg.to_text())?;
        if matches!(cfg.data, DataSource::Synthetic(_)) {
            ds.save(&dir.join("dataset.csv"))?;
        }
    }
    Ok(RunSummary {
        final_record,
        records: out.records,
        out_dir: cfg.out_dir.clone(),
    })
}

/// Parameters a sweep may vary.
pub const SWEEP_KEYS: [&str; 5] = ["C", "tau", "eta1", "eta2", "lambda_novel_ramp"];

/// Cartesian grid over hyperparameters, parsed from `key=v1,v2;key=...`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    axes: Vec<(String, Vec<f64>)>,
}

impl SweepGrid {
    pub fn new(axes: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|(_, v)| v.is_empty()) {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        for (k, _) in &axes {
            if !SWEEP_KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!(
                    "cannot sweep {k:?}; choose from {SWEEP_KEYS:?}"
                )));
            }
        }
        Ok(Self { axes })
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let mut axes = Vec::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("grid axis {part:?} is not key=v1,v2,...")))?;
            let values = values
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(|v| parse_value::<f64>(key.trim(), v))
                .collect::<Result<Vec<_>>>()?;
            axes.push((key.trim().to_string(), values));
        }
        Self::new(axes)
    }

    pub fn keys(&self) -> Vec<&str> {
        self.axes.iter().map(|(k, _)| k.as_str()).collect()
    }

    /// Every grid point, first axis varying slowest.
    pub fn points(&self) -> Vec<Vec<(String, f64)>> {
        let mut points: Vec<Vec<(String, f64)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push((key.clone(), v));
                        q
                    })
                })
                .collect();
        }
        points
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub params: Vec<(String, f64)>,
    pub outcome: std::result::Result<MetricsRecord, String>,
}

/// Runs one experiment per grid point with shared seeds. A failing point is
/// reported in its row and the sweep continues.
pub fn run_sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for (n, point) in grid.points().into_iter().enumerate() {
        let mut cfg = base.clone();
        cfg.out_dir = base
            .out_dir
            .as_ref()
            .map(|d| d.join(format!("point_{n:03}")));
        let outcome = point
            .iter()
            .try_for_each(|(k, v)| cfg.set(k, &v.to_string()))
            .and_then(|_| run_experiment(&cfg))
            .map(|s| s.final_record)
            .map_err(|e| e.to_string());
        rows.push(SweepRow {
            params: point,
            outcome,
        });
    }
    if let Some(dir) = &base.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("summary.csv"), sweep_csv(grid, &rows))?;
    }
    Ok(rows)
}

pub fn sweep_csv(grid: &SweepGrid, rows: &[SweepRow]) -> String {
    let mut out = grid.keys().join(",");
    out.push_str(",seen_acc,novel_acc,all_acc,status\n");
    for row in rows {
        for (_, v) in &row.params {
            let _ = write!(out, "{v},");
        }
        match &row.outcome {
            Ok(r) => {
                let _ = writeln!(
                    out,
                    "{},{},{},ok",
                    opt_cell(r.seen_acc),
                    opt_cell(r.novel_acc),
                    opt_cell(r.all_acc)
                );
            }
            Err(e) => {
                let msg = e.replace([',', '\n'], ";");
                let _ = writeln!(out, ",,,failed: {msg}");
            }
        }
    }
    out
}

/// CSV of `id,label,pred,z0..z{K-1}` for every sample in the dataset.
pub fn dump_embeddings(model: &Model, ds: &Dataset) -> Result<String> {
    let arch = model.architecture();
    if arch.input_dim != ds.dim() || arch.output_dim != ds.num_classes() {
        return Err(Error::Shape(format!(
            "checkpoint maps {} -> {} but the dataset has D = {} and K = {}",
            arch.input_dim,
            arch.output_dim,
            ds.dim(),
            ds.num_classes()
        )));
    }
    let logits = model.forward(ds.features().view())?;
    let mut out = String::from("id,label,pred");
    for j in 0..arch.output_dim {
        let _ = write!(out, ",z{j}");
    }
    out.push('\n');
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let pred = numeric::argmax(row.as_slice().expect("standard layout"));
        let _ = write!(out, "{},{},{}", ds.ids()[i], ds.labels()[i], pred);
        for z in row {
            let _ = write!(out, ",{z}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text("C = 5\ntau=0.3 # comment\nhidden = 32\nno_pc = true\nseed = 9\n")
            .unwrap();
        assert_eq!(cfg.hyper.margin_scale, 5.0);
        assert_eq!(cfg.hidden, Some(32));
        assert!(cfg.ablation.no_pc);
        assert_eq!(cfg.init_seed, 9);
        let again = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn config_rejects_unknown_keys_and_mixed_sources() {
        assert!(ExperimentConfig::from_text("bogus = 1").is_err());
        assert!(ExperimentConfig::from_text("data = x.csv\nsynthetic.K = 4").is_err());
        assert!(ExperimentConfig::from_text("synthetic.K = 4\ndata = x.csv").is_err());
        assert!(ExperimentConfig::from_text("no_am = maybe").is_err());
    }

    #[test]
    fn grid_parsing() {
        let g = SweepGrid::parse("C=1,5,10,15,20").unwrap();
        assert_eq!(g.points().len(), 5);
        let g = SweepGrid::parse("tau=0.2,0.3;eta1=1,2,3").unwrap();
        assert_eq!(g.points().len(), 6);
        assert_eq!(
            g.points()[1],
            vec![("tau".into(), 0.2), ("eta1".into(), 2.0)]
        );
        assert!(SweepGrid::parse("").is_err());
        assert!(SweepGrid::parse("C=").is_err());
        assert!(SweepGrid::parse("epochs=1,2").is_err());
    }
}
