//! Evaluation protocol: Hungarian-matched accuracies, NMI and the KL pace
//! trace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::ClassDistribution;

/// Minimum-cost perfect matching on a square cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// `mapping[row]` is the column assigned to `row`.
    pub mapping: Vec<usize>,
    pub total_cost: f64,
}

/// Kuhn-Munkres with row/column potentials, `O(n^3)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<AssignmentResult> {
    let n = cost.len();
    if let Some((i, row)) = cost.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(Error::InvalidInput(format!(
            "cost matrix is not square: row {i} has {} entries, expected {n}",
            row.len()
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput(
            "cost matrix has non-finite entries".into(),
        ));
    }
    if n == 0 {
        return Ok(AssignmentResult {
            mapping: Vec::new(),
            total_cost: 0.0,
        });
    }

    // 1-based potentials; column 0 is a virtual start column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < min_slack[j] {
                    min_slack[j] = reduced;
                    way[j] = col0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut mapping = vec![0usize; n];
    for j in 1..=n {
        mapping[owner[j] - 1] = j - 1;
    }
    let total_cost = mapping.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(AssignmentResult {
        mapping,
        total_cost,
    })
}

/// Largest number of matched samples over one-to-one maps from predicted
/// clusters to target classes, restricted to the given clusters and classes.
fn max_matched(preds: &[usize], targets: &[usize], clusters: &[usize], classes: &[usize]) -> usize {
    if clusters.is_empty() || classes.is_empty() {
        return 0;
    }
    let n = clusters.len().max(classes.len());
    let mut counts = vec![vec![0usize; n]; n];
    for (&p, &t) in preds.iter().zip(targets) {
        let (Some(r), Some(c)) = (
            clusters.iter().position(|&x| x == p),
            classes.iter().position(|&x| x == t),
        ) else {
            continue;
        };
        counts[r][c] += 1;
    }
    let cost: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| -(c as f64)).collect())
        .collect();
    let assignment = hungarian(&cost).expect("count matrix is square and finite");
    assignment
        .mapping
        .iter()
        .enumerate()
        .map(|(r, &c)| counts[r][c])
        .sum()
}

fn distinct(values: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = values.into_iter().collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn check_aligned(preds: &[usize], targets: &[usize]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    Ok(())
}

/// Plain accuracy on samples whose target is a seen class. `None` when there
/// are none.
pub fn seen_accuracy(
    preds: &[usize],
    targets: &[usize],
    seen_classes: &[usize],
) -> Result<Option<f64>> {
    check_aligned(preds, targets)?;
    let (mut correct, mut total) = (0usize, 0usize);
    for (&p, &t) in preds.iter().zip(targets) {
        if seen_classes.contains(&t) {
            total += 1;
            correct += usize::from(p == t);
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

/// Clustering accuracy on novel-class samples after optimally matching
/// predicted indices to novel classes. `None` when no sample is novel.
pub fn novel_accuracy(
    preds: &[usize],
    targets: &[usize],
    novel_classes: &[usize],
) -> Result<Option<f64>> {
    check_aligned(preds, targets)?;
    let (p, t): (Vec<usize>, Vec<usize>) = preds
        .iter()
        .zip(targets)
        .filter(|(_, t)| novel_classes.contains(t))
        .map(|(&p, &t)| (p, t))
        .unzip();
    if t.is_empty() {
        return Ok(None);
    }
    let clusters = distinct(p.iter().copied());
    let matched = max_matched(&p, &t, &clusters, novel_classes);
    Ok(Some(matched as f64 / t.len() as f64))
}

/// How predicted indices are matched to classes for overall accuracy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverallMatching {
    /// Seen classes map to themselves; the remaining prediction indices are
    /// matched to novel classes over the whole evaluation set.
    #[default]
    Pinned,
    /// One free matching of all prediction indices to all classes.
    Free,
}

pub fn overall_accuracy(
    preds: &[usize],
    targets: &[usize],
    seen_classes: &[usize],
    novel_classes: &[usize],
    matching: OverallMatching,
) -> Result<Option<f64>> {
    check_aligned(preds, targets)?;
    if targets.is_empty() {
        return Ok(None);
    }
    let matched = match matching {
        OverallMatching::Pinned => {
            let seen_correct = preds
                .iter()
                .zip(targets)
                .filter(|(p, t)| p == t && seen_classes.contains(t))
                .count();
            let clusters = distinct(preds.iter().copied().filter(|p| !seen_classes.contains(p)));
            seen_correct + max_matched(preds, targets, &clusters, novel_classes)
        }
        OverallMatching::Free => {
            let clusters = distinct(preds.iter().copied());
            let classes = distinct(
                seen_classes
                    .iter()
                    .chain(novel_classes)
                    .copied()
                    .chain(targets.iter().copied()),
            );
            max_matched(preds, targets, &clusters, &classes)
        }
    };
    Ok(Some(matched as f64 / targets.len() as f64))
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
pub fn nmi(preds: &[usize], targets: &[usize]) -> Result<f64> {
    check_aligned(preds, targets)?;
    if preds.is_empty() {
        return Err(Error::InvalidInput("NMI of empty partitions".into()));
    }
    let rows = distinct(preds.iter().copied());
    let cols = distinct(targets.iter().copied());
    let mut joint = vec![vec![0usize; cols.len()]; rows.len()];
    for (p, t) in preds.iter().zip(targets) {
        let r = rows.binary_search(p).expect("present");
        let c = cols.binary_search(t).expect("present");
        joint[r][c] += 1;
    }
    let n = preds.len() as f64;
    let row_sums: Vec<usize> = joint.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> = (0..cols.len())
        .map(|c| joint.iter().map(|r| r[c]).sum())
        .collect();
    let h_pred = entropy(row_sums.iter().copied(), n);
    let h_true = entropy(col_sums.iter().copied(), n);
    if h_pred == 0.0 || h_true == 0.0 {
        return Ok(if h_pred == 0.0 && h_true == 0.0 {
            1.0
        } else {
            0.0
        });
    }
    let mut mi = 0.0;
    for (r, row) in joint.iter().enumerate() {
        for (c, &count) in row.iter().enumerate() {
            if count > 0 {
                let nij = count as f64;
                mi += nij / n * (n * nij / (row_sums[r] as f64 * col_sums[c] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (h_pred + h_true))).clamp(0.0, 1.0))
}

/// `KL(pi_hat || uniform)` for each recorded distribution.
pub fn pace_trace(history: &[ClassDistribution]) -> Vec<f64> {
    history.iter().map(ClassDistribution::kl_to_prior).collect()
}

/// One evaluation row, written as a JSON object per line.
///
/// Accuracies are `null` when the corresponding test subset is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub seen_acc: Option<f64>,
    pub novel_acc: Option<f64>,
    pub all_acc: Option<f64>,
    pub nmi_novel: Option<f64>,
    /// KL of the class-distribution estimate over the training pool to uniform.
    pub kl_to_prior: f64,
    pub loss_am: f64,
    pub loss_pc: f64,
    pub loss_uc: f64,
    pub loss_entropy: f64,
    pub loss_total: f64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: Option<f64>| match v {
            Some(x) if !(0.0..=1.0).contains(&x) => Err(Error::InvalidInput(format!(
                "{name} = {x} outside [0, 1] at epoch {}",
                self.epoch
            ))),
            _ => Ok(()),
        };
        unit("seen_acc", self.seen_acc)?;
        unit("novel_acc", self.novel_acc)?;
        unit("all_acc", self.all_acc)?;
        unit("nmi_novel", self.nmi_novel)?;
        if !(self.kl_to_prior >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "kl_to_prior = {} at epoch {}",
                self.kl_to_prior, self.epoch
            )));
        }
        let losses = [
            self.loss_am,
            self.loss_pc,
            self.loss_uc,
            self.loss_entropy,
            self.loss_total,
        ];
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite loss at epoch {}",
                self.epoch
            )));
        }
        Ok(())
    }
}

/// Parses and validates a metrics JSONL document.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let record: MetricsRecord = serde_json::from_str(line)?;
            record.validate()?;
            Ok(record)
        })
        .collect()
}
