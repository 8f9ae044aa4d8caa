//! Scalar and vector kernels shared by the losses and the evaluation code.
//!
//! Everything here is 64-bit and pure. Softmax and log-sum-exp always shift by
//! the maximum before exponentiating.

use crate::error::{Error, Result};

/// Tolerance used when validating that a vector sums to one.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Norms at or below this value are treated as degenerate by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// A probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidInput("probability vector is empty".into()));
        }
        if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "probability vector has negative or non-finite entries: {p:?}"
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!(
                "probability vector sums to {sum}, expected 1"
            )));
        }
        Ok(Self(p))
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "uniform distribution over zero classes");
        Self(vec![1.0 / k as f64; k])
    }

    /// L1-normalizes a non-negative vector. Returns `None` when the mass is zero.
    pub fn from_unnormalized(mass: &[f64]) -> Option<Self> {
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return None;
        }
        Some(Self(mass.iter().map(|m| m / total).collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the maximum entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax written into `out`. Inputs are assumed finite.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "softmax input has non-finite entries: {logits:?}"
        )));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(ProbVector(out))
}

/// `KL(p || q)` over raw slices, with `0 ln 0 = 0`.
///
/// Returns an error when `q` is zero somewhere `p` has mass.
pub fn kl_divergence_raw(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!(
            "KL over vectors of different length ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (j, (&pj, &qj)) in p.iter().zip(q).enumerate() {
        if pj == 0.0 {
            continue;
        }
        if qj <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "KL reference has zero mass at index {j} where p = {pj}"
            )));
        }
        total += pj * (pj / qj).ln();
    }
    // Rounding can push a true zero slightly negative.
    Ok(total.max(0.0))
}

pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    kl_divergence_raw(p.as_slice(), q.as_slice())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f64>,
    /// Euclidean norm of the input.
    pub norm: f64,
    /// Set when the input norm was at or below [`NORM_EPS`]; `vector` is then the input.
    pub degenerate: bool,
}

pub fn l2_normalize(v: &[f64]) -> Normalized {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > NORM_EPS {
        Normalized {
            vector: v.iter().map(|x| x / norm).collect(),
            norm,
            degenerate: false,
        }
    } else {
        Normalized {
            vector: v.to_vec(),
            norm,
            degenerate: true,
        }
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn numerical_gradient<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest entrywise relative error between the analytic gradient of `f` and
/// its central-difference estimate at `x`.
///
/// `f` returns `(value, gradient)`. The relative error of entry `i` is
/// `|a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let (_, analytic) = f(x);
    assert_eq!(
        analytic.len(),
        x.len(),
        "gradient length differs from input"
    );
    let numeric = numerical_gradient(|p| f(p).0, x, h);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
