//! Training objective: adaptive-margin cross-entropy, pseudo-label
//! contrastive clustering, unsupervised contrastive learning and the
//! mean-prediction entropy regularizer, each with an analytic gradient with
//! respect to the logits.
//!
//! The adaptive margin for class `j` is
//!
//! ```text
//! margin_j = -KL(pi_hat || uniform) * (pi_hat_j / max(pi_hat)) * C
//! ```
//!
//! where `pi_hat` is estimated from the soft predictions of labeled samples
//! and of unlabeled samples whose confidence clears a class-dependent
//! threshold. Over-predicted classes get the most negative margin, which
//! raises their target logit inside the loss and slows their learning.
//!
//! Pseudo-labels, confidence masks and margins are constants within an
//! iteration: no gradient flows through the argmax, the indicator or the
//! distribution estimate.

use ndarray::{Array2, ArrayView2, Axis};

use crate::data::MultiViewBatch;
use crate::error::{Error, Result};
use crate::numeric::{self, kl_divergence, log_sum_exp, softmax_into, ProbVector, NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Maximum margin magnitude `C`.
    pub margin_scale: f64,
    /// Contrastive temperature `tau`.
    pub temperature: f64,
    /// Weight of the pseudo-label contrastive term.
    pub pc_weight: f64,
    /// Weight of the unsupervised contrastive term.
    pub uc_weight: f64,
    /// Fixed confidence threshold for seen classes.
    pub seen_threshold: f64,
    /// Novel-class threshold at the start of training.
    pub novel_threshold_base: f64,
    /// Amount the novel-class threshold grows by the end of training.
    pub novel_threshold_ramp: f64,
    /// L2-normalize logits before taking contrastive similarities.
    pub normalize_similarity: bool,
    /// Exponential smoothing of the class-distribution estimate across
    /// iterations; 0 uses the current batch only.
    pub distribution_ema: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            margin_scale: 10.0,
            temperature: 0.4,
            pc_weight: 1.0,
            uc_weight: 1.0,
            seen_threshold: 0.95,
            novel_threshold_base: 0.4,
            novel_threshold_ramp: 0.4,
            normalize_similarity: true,
            distribution_ema: 0.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.margin_scale > 0.0) {
            return bad(format!("C must be positive, got {}", self.margin_scale));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("tau must be positive, got {}", self.temperature));
        }
        if !(self.pc_weight >= 0.0 && self.uc_weight >= 0.0) {
            return bad(format!(
                "loss weights must be non-negative, got eta1={} eta2={}",
                self.pc_weight, self.uc_weight
            ));
        }
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.seen_threshold) || !in_unit(self.novel_threshold_base) {
            return bad("confidence thresholds must lie in (0, 1]".into());
        }
        if !(self.novel_threshold_ramp >= 0.0)
            || self.novel_threshold_base + self.novel_threshold_ramp > 1.0
        {
            return bad(format!(
                "novel threshold {} + {} exceeds 1",
                self.novel_threshold_base, self.novel_threshold_ramp
            ));
        }
        if !(0.0..1.0).contains(&self.distribution_ema) {
            return bad(format!(
                "distribution EMA decay must lie in [0, 1), got {}",
                self.distribution_ema
            ));
        }
        Ok(())
    }
}

/// Current iteration out of the total number of training iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSchedule {
    step: usize,
    total: usize,
}

impl TrainSchedule {
    pub fn new(step: usize, total: usize) -> Result<Self> {
        if total == 0 || step > total {
            return Err(Error::InvalidInput(format!(
                "schedule step {step} of {total} is out of range"
            )));
        }
        Ok(Self { step, total })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn progress(&self) -> f64 {
        self.step as f64 / self.total as f64
    }
}

/// Confidence threshold for a sample whose predicted class is `class`:
/// fixed for seen classes, linearly ramped for novel classes.
pub fn confidence_threshold(
    class: usize,
    seen_classes: &[usize],
    sched: TrainSchedule,
    hp: &Hyperparams,
) -> f64 {
    if seen_classes.contains(&class) {
        hp.seen_threshold
    } else {
        hp.novel_threshold_base + hp.novel_threshold_ramp * sched.progress()
    }
}

/// Whether an unlabeled prediction clears the threshold of its argmax class.
pub fn is_confident(
    probs: &[f64],
    seen_classes: &[usize],
    sched: TrainSchedule,
    hp: &Hyperparams,
) -> bool {
    let c = numeric::argmax(probs);
    probs[c] >= confidence_threshold(c, seen_classes, sched, hp)
}

/// Estimated class distribution paired with the uniform prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pi_hat: ProbVector,
    prior: ProbVector,
}

impl ClassDistribution {
    pub fn new(pi_hat: ProbVector) -> Self {
        let prior = ProbVector::uniform(pi_hat.len());
        Self { pi_hat, prior }
    }

    pub fn uniform(k: usize) -> Self {
        Self::new(ProbVector::uniform(k))
    }

    pub fn pi_hat(&self) -> &ProbVector {
        &self.pi_hat
    }

    pub fn prior(&self) -> &ProbVector {
        &self.prior
    }

    pub fn num_classes(&self) -> usize {
        self.pi_hat.len()
    }

    pub fn kl_to_prior(&self) -> f64 {
        kl_divergence(&self.pi_hat, &self.prior).expect("uniform prior has full support")
    }

    /// `decay * previous + (1 - decay) * self`.
    pub fn smoothed(&self, previous: &ClassDistribution, decay: f64) -> ClassDistribution {
        if decay == 0.0 {
            return self.clone();
        }
        let mixed: Vec<f64> = previous
            .pi_hat
            .as_slice()
            .iter()
            .zip(self.pi_hat.as_slice())
            .map(|(p, c)| decay * p + (1.0 - decay) * c)
            .collect();
        let pi_hat = ProbVector::from_unnormalized(&mixed).unwrap_or_else(|| self.pi_hat.clone());
        Self::new(pi_hat)
    }
}

/// Sums the soft predictions of all labeled samples and of every unlabeled
/// sample that clears its class threshold, then L1-normalizes. Falls back to
/// uniform when nothing contributes.
pub fn estimate_class_distribution<P: AsRef<[f64]>>(
    num_classes: usize,
    labeled_probs: &[P],
    unlabeled_probs: &[P],
    seen_classes: &[usize],
    sched: TrainSchedule,
    hp: &Hyperparams,
) -> ClassDistribution {
    let mut mass = vec![0.0; num_classes];
    let mut add = |p: &[f64]| {
        debug_assert_eq!(p.len(), num_classes);
        for (m, v) in mass.iter_mut().zip(p) {
            *m += v;
        }
    };
    for p in labeled_probs {
        add(p.as_ref());
    }
    for p in unlabeled_probs {
        if is_confident(p.as_ref(), seen_classes, sched, hp) {
            add(p.as_ref());
        }
    }
    match ProbVector::from_unnormalized(&mass) {
        Some(pi_hat) => ClassDistribution::new(pi_hat),
        None => ClassDistribution::uniform(num_classes),
    }
}

/// Per-class margins; every entry is non-positive and the modal class gets
/// `-KL * C`.
pub fn adaptive_margins(dist: &ClassDistribution, margin_scale: f64) -> Vec<f64> {
    let kl = dist.kl_to_prior();
    let max = dist.pi_hat.max();
    dist.pi_hat
        .as_slice()
        .iter()
        .map(|&p| -kl * (p / max) * margin_scale)
        .collect()
}

/// A loss value and its gradient with respect to the logits that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<G> {
    pub value: f64,
    pub grad: G,
}

/// Gradients with respect to the weak-view and strong-view logits of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGrads {
    pub weak: Array2<f64>,
    pub strong: Array2<f64>,
}

impl ViewGrads {
    pub fn zeros(batch: usize, classes: usize) -> Self {
        Self {
            weak: Array2::zeros((batch, classes)),
            strong: Array2::zeros((batch, classes)),
        }
    }

    fn add_scaled(&mut self, other: &ViewGrads, scale: f64) {
        self.weak.scaled_add(scale, &other.weak);
        self.strong.scaled_add(scale, &other.strong);
    }
}

/// Cross-entropy with the target logit shifted by `-margins[target]`.
pub fn adaptive_margin_loss(
    logits: &[f64],
    target: usize,
    margins: &[f64],
) -> LossResult<Vec<f64>> {
    assert!(target < logits.len(), "target {target} out of range");
    assert_eq!(logits.len(), margins.len(), "one margin per class");
    let mut adjusted = logits.to_vec();
    adjusted[target] -= margins[target];
    let value = log_sum_exp(&adjusted) - adjusted[target];
    let mut grad = vec![0.0; logits.len()];
    softmax_into(&adjusted, &mut grad);
    grad[target] -= 1.0;
    LossResult { value, grad }
}

pub fn cross_entropy(logits: &[f64], target: usize) -> LossResult<Vec<f64>> {
    adaptive_margin_loss(logits, target, &vec![0.0; logits.len()])
}

/// Fills the batch's confidence partition from the weak-view logits.
///
/// Every unlabeled sample receives the argmax of its weak-view prediction as
/// pseudo-label; it is confident when that prediction clears the threshold of
/// the predicted class.
pub fn partition_batch(
    batch: &mut MultiViewBatch,
    weak_logits: ArrayView2<'_, f64>,
    seen_classes: &[usize],
    sched: TrainSchedule,
    hp: &Hyperparams,
) -> Result<()> {
    if weak_logits.nrows() != batch.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for a batch of {}",
            weak_logits.nrows(),
            batch.len()
        )));
    }
    let k = weak_logits.ncols();
    let mut probs = vec![0.0; k];
    let mut confident = vec![false; batch.len()];
    let mut pseudo = vec![None; batch.len()];
    for (i, row) in weak_logits.outer_iter().enumerate() {
        if batch.is_labeled(i) {
            continue;
        }
        softmax_into(row.as_slice().expect("standard layout"), &mut probs);
        pseudo[i] = Some(numeric::argmax(&probs));
        confident[i] = is_confident(&probs, seen_classes, sched, hp);
    }
    batch.set_partition(confident, pseudo)
}

fn check_logits(
    batch: &MultiViewBatch,
    weak: ArrayView2<'_, f64>,
    strong: ArrayView2<'_, f64>,
) -> Result<()> {
    if weak.nrows() != batch.len() || weak.dim() != strong.dim() {
        return Err(Error::Shape(format!(
            "logits {:?}/{:?} do not match a batch of {}",
            weak.dim(),
            strong.dim(),
            batch.len()
        )));
    }
    if !batch.is_partitioned() {
        return Err(Error::InvalidInput(
            "batch has no confidence partition".into(),
        ));
    }
    Ok(())
}

/// Adaptive-margin loss over a partitioned batch: the mean over labeled weak
/// views with ground-truth targets, plus the strong views of confident
/// unlabeled samples with their pseudo-labels divided by the full unlabeled
/// count.
pub fn am_batch_loss(
    batch: &MultiViewBatch,
    weak_logits: ArrayView2<'_, f64>,
    strong_logits: ArrayView2<'_, f64>,
    margins: &[f64],
) -> Result<LossResult<ViewGrads>> {
    check_logits(batch, weak_logits, strong_logits)?;
    let k = weak_logits.ncols();
    if margins.len() != k {
        return Err(Error::Shape(format!(
            "{} margins for {k} classes",
            margins.len()
        )));
    }
    let n_l = batch.n_labeled();
    let n_u = batch.n_unlabeled();
    let mut grads = ViewGrads::zeros(batch.len(), k);
    let mut labeled_sum = 0.0;
    let mut unlabeled_sum = 0.0;
    for i in 0..batch.len() {
        if let Some(y) = batch.label(i) {
            let row = weak_logits.row(i);
            let l = adaptive_margin_loss(row.as_slice().expect("standard layout"), y, margins);
            labeled_sum += l.value;
            let scale = 1.0 / n_l as f64;
            for (g, v) in grads.weak.row_mut(i).iter_mut().zip(&l.grad) {
                *g = v * scale;
            }
        } else if batch.is_confident(i) {
            let target = batch.pseudo_labels()[i].expect("confident samples carry a pseudo-label");
            let row = strong_logits.row(i);
            let l = adaptive_margin_loss(row.as_slice().expect("standard layout"), target, margins);
            unlabeled_sum += l.value;
            let scale = 1.0 / n_u as f64;
            for (g, v) in grads.strong.row_mut(i).iter_mut().zip(&l.grad) {
                *g = v * scale;
            }
        }
    }
    let mut value = 0.0;
    if n_l > 0 {
        value += labeled_sum / n_l as f64;
    }
    if n_u > 0 {
        value += unlabeled_sum / n_u as f64;
    }
    Ok(LossResult { value, grad: grads })
}

/// Rows of `logits` mapped to the vectors used for similarities.
struct Embedding {
    vectors: Array2<f64>,
    norms: Vec<f64>,
    normalized: Vec<bool>,
}

impl Embedding {
    fn new(logits: ArrayView2<'_, f64>, normalize: bool) -> Self {
        let mut vectors = logits.to_owned();
        let mut norms = vec![1.0; logits.nrows()];
        let mut normalized = vec![false; logits.nrows()];
        if normalize {
            for (i, mut row) in vectors.outer_iter_mut().enumerate() {
                let norm = row.dot(&row).sqrt();
                norms[i] = norm;
                if norm > NORM_EPS {
                    row /= norm;
                    normalized[i] = true;
                }
            }
        }
        Self {
            vectors,
            norms,
            normalized,
        }
    }

    /// Pairwise similarities divided by the temperature.
    fn similarities(&self, tau: f64) -> Array2<f64> {
        self.vectors.dot(&self.vectors.t()) / tau
    }

    /// Maps `dL/ds` (similarity weights) back to `dL/dlogits`.
    fn backward(&self, weights: &Array2<f64>, tau: f64) -> Array2<f64> {
        let sym = weights + &weights.t();
        let mut grad = sym.dot(&self.vectors) / tau;
        for (i, mut g) in grad.outer_iter_mut().enumerate() {
            if self.normalized[i] {
                let u = self.vectors.row(i);
                let proj = u.dot(&g);
                g.scaled_add(-proj, &u);
                g /= self.norms[i];
            }
        }
        grad
    }
}

/// Pseudo-label contrastive clustering over a set of views with their labels
/// or pseudo-labels.
///
/// For anchor `i` the positives are all other views with the same label and
/// the candidates are all other views. Anchors without positives are skipped
/// and do not count toward the mean. Fewer than two views yield zero.
pub fn pc_loss(
    logits: ArrayView2<'_, f64>,
    labels: &[usize],
    hp: &Hyperparams,
) -> Result<LossResult<Array2<f64>>> {
    let n = logits.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {n} views",
            labels.len()
        )));
    }
    let mut grad = Array2::zeros(logits.dim());
    if n < 2 {
        return Ok(LossResult { value: 0.0, grad });
    }
    let tau = hp.temperature;
    let emb = Embedding::new(logits, hp.normalize_similarity);
    let sim = emb.similarities(tau);

    let mut weights = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    let mut anchors = 0usize;
    let mut candidate_sims = Vec::with_capacity(n);
    let mut positive_sims = Vec::with_capacity(n);
    for i in 0..n {
        candidate_sims.clear();
        positive_sims.clear();
        for a in (0..n).filter(|&a| a != i) {
            candidate_sims.push(sim[[i, a]]);
            if labels[a] == labels[i] {
                positive_sims.push(sim[[i, a]]);
            }
        }
        if positive_sims.is_empty() {
            continue;
        }
        anchors += 1;
        let lse_pos = log_sum_exp(&positive_sims);
        let lse_all = log_sum_exp(&candidate_sims);
        total += lse_all - lse_pos + (positive_sims.len() as f64).ln();
        for a in (0..n).filter(|&a| a != i) {
            let mut w = (sim[[i, a]] - lse_all).exp();
            if labels[a] == labels[i] {
                w -= (sim[[i, a]] - lse_pos).exp();
            }
            weights[[i, a]] = w;
        }
    }
    if anchors == 0 {
        return Ok(LossResult { value: 0.0, grad });
    }
    let scale = 1.0 / anchors as f64;
    weights *= scale;
    grad = emb.backward(&weights, tau);
    Ok(LossResult {
        value: total * scale,
        grad,
    })
}

/// Instance-discrimination loss for low-confidence samples.
///
/// Each pair `(a, b)` holds the two views of one low-confidence sample; both
/// views act as anchors with the other as positive. Candidates for an anchor
/// are all rows of `logits` except the anchor itself, so `logits` should hold
/// the low-confidence views together with the confident-set views.
pub fn uc_loss(
    logits: ArrayView2<'_, f64>,
    pairs: &[(usize, usize)],
    hp: &Hyperparams,
) -> Result<LossResult<Array2<f64>>> {
    let n = logits.nrows();
    if let Some(&(a, b)) = pairs.iter().find(|&&(a, b)| a >= n || b >= n || a == b) {
        return Err(Error::InvalidInput(format!(
            "invalid view pair ({a}, {b}) for {n} views"
        )));
    }
    let mut grad = Array2::zeros(logits.dim());
    if pairs.is_empty() {
        return Ok(LossResult { value: 0.0, grad });
    }
    let tau = hp.temperature;
    let emb = Embedding::new(logits, hp.normalize_similarity);
    let sim = emb.similarities(tau);

    let mut weights = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    let mut candidate_sims = Vec::with_capacity(n);
    for &(x, y) in pairs {
        for (anchor, positive) in [(x, y), (y, x)] {
            candidate_sims.clear();
            candidate_sims.extend((0..n).filter(|&a| a != anchor).map(|a| sim[[anchor, a]]));
            let lse = log_sum_exp(&candidate_sims);
            total += lse - sim[[anchor, positive]];
            for a in (0..n).filter(|&a| a != anchor) {
                weights[[anchor, a]] += (sim[[anchor, a]] - lse).exp();
            }
            weights[[anchor, positive]] -= 1.0;
        }
    }
    let scale = 1.0 / (2 * pairs.len()) as f64;
    weights *= scale;
    grad = emb.backward(&weights, tau);
    Ok(LossResult {
        value: total * scale,
        grad,
    })
}

/// `KL(mean prediction || uniform)` for a set of probability vectors.
pub fn mean_prediction_kl(probs: &[ProbVector]) -> f64 {
    let Some(first) = probs.first() else {
        return 0.0;
    };
    let k = first.len();
    let mut mean = vec![0.0; k];
    for p in probs {
        for (m, v) in mean.iter_mut().zip(p.as_slice()) {
            *m += v;
        }
    }
    let n = probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    numeric::kl_divergence_raw(&mean, ProbVector::uniform(k).as_slice())
        .expect("uniform prior has full support")
}

/// Entropy regularizer on a stack of logits: `KL(mean softmax || uniform)`,
/// differentiated through the mean and each softmax.
pub fn entropy_regularizer(logits: ArrayView2<'_, f64>) -> LossResult<Array2<f64>> {
    let (n, k) = logits.dim();
    let mut grad = Array2::zeros((n, k));
    if n == 0 {
        return LossResult { value: 0.0, grad };
    }
    let mut probs = Array2::<f64>::zeros((n, k));
    for (z, mut p) in logits.outer_iter().zip(probs.outer_iter_mut()) {
        softmax_into(
            z.as_slice().expect("standard layout"),
            p.as_slice_mut().expect("standard layout"),
        );
    }
    let mean = probs.mean_axis(Axis(0)).expect("non-empty");
    let ln_k = (k as f64).ln();
    let mut value = 0.0;
    // d value / d mean_j = ln(mean_j) + ln K + 1; the constant cancels through
    // the softmax Jacobian, so it is dropped.
    let mut outer = vec![0.0; k];
    for j in 0..k {
        if mean[j] > 0.0 {
            let l = mean[j].ln() + ln_k;
            value += mean[j] * l;
            outer[j] = l;
        }
    }
    for (p, mut g) in probs.outer_iter().zip(grad.outer_iter_mut()) {
        let dot: f64 = p.iter().zip(&outer).map(|(a, b)| a * b).sum();
        for j in 0..k {
            g[j] = p[j] * (outer[j] - dot) / n as f64;
        }
    }
    LossResult {
        value: value.max(0.0),
        grad,
    }
}

/// Which terms of the total objective are switched off. Without the adaptive
/// margin term, plain cross-entropy on the same targets takes its place.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_am: bool,
    pub no_pc: bool,
    pub no_uc: bool,
    pub no_entropy: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        no_am: false,
        no_pc: false,
        no_uc: false,
        no_entropy: false,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_am {
            parts.push("no-am");
        }
        if self.no_pc {
            parts.push("no-pc");
        }
        if self.no_uc {
            parts.push("no-uc");
        }
        if self.no_entropy {
            parts.push("no-entropy");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join("+")
        }
    }
}

/// Unweighted value of each objective term. Disabled terms read zero; when the
/// margin term is ablated `am` holds the plain cross-entropy replacing it.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub am: f64,
    pub pc: f64,
    pub uc: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub grad: ViewGrads,
    pub terms: LossTerms,
}

/// Views of the confident set: weak views in batch order, then strong views.
fn confident_views(
    batch: &MultiViewBatch,
    weak: ArrayView2<'_, f64>,
    strong: ArrayView2<'_, f64>,
) -> (Vec<usize>, Vec<usize>, Array2<f64>) {
    let set = batch.confident_set();
    let rows: Vec<usize> = set.iter().map(|&(i, _)| i).collect();
    let mut labels: Vec<usize> = set.iter().map(|&(_, y)| y).collect();
    labels.extend_from_within(..);
    let stacked = ndarray::concatenate(
        Axis(0),
        &[
            weak.select(Axis(0), &rows).view(),
            strong.select(Axis(0), &rows).view(),
        ],
    )
    .expect("matching widths");
    (rows, labels, stacked)
}

/// Scatters gradients of stacked `[weak rows; strong rows]` views back into
/// per-view batch gradients.
fn scatter(target: &mut ViewGrads, rows: &[usize], stacked: ArrayView2<'_, f64>, scale: f64) {
    let m = rows.len();
    for (j, &i) in rows.iter().enumerate() {
        target.weak.row_mut(i).scaled_add(scale, &stacked.row(j));
        target
            .strong
            .row_mut(i)
            .scaled_add(scale, &stacked.row(m + j));
    }
}

/// The full objective `AM + eta1 * PC + eta2 * UC + entropy` on a partitioned
/// batch, with gradients accumulated per view.
pub fn total_loss(
    batch: &MultiViewBatch,
    weak_logits: ArrayView2<'_, f64>,
    strong_logits: ArrayView2<'_, f64>,
    margins: &[f64],
    hp: &Hyperparams,
    ablation: Ablation,
) -> Result<TotalLoss> {
    check_logits(batch, weak_logits, strong_logits)?;
    let k = weak_logits.ncols();
    let mut grad = ViewGrads::zeros(batch.len(), k);
    let mut terms = LossTerms::default();

    let zero_margins;
    let am_margins = if ablation.no_am {
        zero_margins = vec![0.0; k];
        &zero_margins
    } else {
        margins
    };
    let am = am_batch_loss(batch, weak_logits, strong_logits, am_margins)?;
    terms.am = am.value;
    grad.add_scaled(&am.grad, 1.0);
    let mut value = am.value;

    let (conf_rows, conf_labels, conf_stack) = confident_views(batch, weak_logits, strong_logits);

    if !ablation.no_pc {
        let pc = pc_loss(conf_stack.view(), &conf_labels, hp)?;
        terms.pc = pc.value;
        value += hp.pc_weight * pc.value;
        scatter(&mut grad, &conf_rows, pc.grad.view(), hp.pc_weight);
    }

    let low = batch.low_confidence_set();
    if !ablation.no_uc && !low.is_empty() {
        let low_stack = ndarray::concatenate(
            Axis(0),
            &[
                weak_logits.select(Axis(0), &low).view(),
                strong_logits.select(Axis(0), &low).view(),
            ],
        )
        .expect("matching widths");
        let all = ndarray::concatenate(Axis(0), &[conf_stack.view(), low_stack.view()])
            .expect("matching widths");
        let base = conf_stack.nrows();
        let m = low.len();
        let pairs: Vec<(usize, usize)> = (0..m).map(|j| (base + j, base + m + j)).collect();
        let uc = uc_loss(all.view(), &pairs, hp)?;
        terms.uc = uc.value;
        value += hp.uc_weight * uc.value;
        scatter(
            &mut grad,
            &conf_rows,
            uc.grad.slice(ndarray::s![..base, ..]),
            hp.uc_weight,
        );
        scatter(
            &mut grad,
            &low,
            uc.grad.slice(ndarray::s![base.., ..]),
            hp.uc_weight,
        );
    }

    if !ablation.no_entropy {
        let unl: Vec<usize> = (0..batch.len()).filter(|&i| !batch.is_labeled(i)).collect();
        if !unl.is_empty() {
            let stack = ndarray::concatenate(
                Axis(0),
                &[
                    weak_logits.select(Axis(0), &unl).view(),
                    strong_logits.select(Axis(0), &unl).view(),
                ],
            )
            .expect("matching widths");
            let ent = entropy_regularizer(stack.view());
            terms.entropy = ent.value;
            value += ent.value;
            scatter(&mut grad, &unl, ent.grad.view(), 1.0);
        }
    }

    Ok(TotalLoss { value, grad, terms })
}
