//! Helpers for per-sample class distributions (softmax outputs).
//!
//! Distributions are plain `ndarray` rows: a `ProbVector` is an
//! `ArrayView1<f64>` summing to one, a `ProbMatrix` is an `Array2<f64>` whose
//! rows are distributions.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the row sum when validating a distribution.
pub const SUM_TOLERANCE: f64 = 1e-6;

pub type ProbMatrix = Array2<f64>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("not a probability distribution (sum {sum}, min {min})")]
pub struct NotADistribution {
    pub sum: f64,
    pub min: f64,
}

pub fn check_distribution(p: ArrayView1<f64>) -> Result<(), NotADistribution> {
    let sum = p.sum();
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    if p.is_empty() || !sum.is_finite() || (sum - 1.0).abs() > SUM_TOLERANCE || min < 0.0 {
        return Err(NotADistribution { sum, min });
    }
    Ok(())
}

/// `ln(max(p, PROB_FLOOR))`
#[inline]
pub fn safe_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<f64>) -> ProbMatrix {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn max_prob(p: ArrayView1<f64>) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn argmax_rows(probs: ArrayView2<f64>) -> Vec<usize> {
    probs.axis_iter(Axis(0)).map(argmax).collect()
}

/// Elementwise mean of a non-empty set of distributions.
pub fn mean_distribution<'a, I>(rows: I) -> Array1<f64>
where
    I: IntoIterator<Item = ArrayView1<'a, f64>>,
{
    let mut iter = rows.into_iter();
    let first = iter.next().expect("mean of an empty set of distributions");
    let mut acc = first.to_owned();
    let mut count = 1.0;
    for row in iter {
        acc += &row;
        count += 1.0;
    }
    acc / count
}

/// Shannon entropy in nats; `0 ln 0` is taken as 0.
pub fn entropy(p: ArrayView1<f64>) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}
