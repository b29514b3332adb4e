//! Accuracy and calibration metrics over a probability matrix.
//!
//! Conventions: ECE uses equal-width, right-closed confidence bins
//! `(i/B, (i+1)/B]` with confidence 0 placed in the first bin; NLL is the mean
//! negative log-likelihood in nats with probabilities floored at `1e-12`;
//! Brier is the mean over samples of the squared error summed over classes,
//! so it lies in `[0, 2]`.

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::prob::{argmax, max_prob, safe_ln};

pub const DEFAULT_ECE_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least one bin")]
    NoBins,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub n_bins: usize,
    pub n_samples: usize,
}

fn check(probs: ArrayView2<f64>, labels: &[usize]) -> Result<(), MetricsError> {
    if probs.nrows() != labels.len() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} rows, {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if probs.nrows() == 0 {
        return Err(MetricsError::ShapeMismatch("no samples".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= probs.ncols()) {
        return Err(MetricsError::ShapeMismatch(format!("label {y} with {} classes", probs.ncols())));
    }
    Ok(())
}

fn rows<'a>(probs: ArrayView2<'a, f64>, labels: &'a [usize]) -> impl Iterator<Item = (ArrayView1<'a, f64>, usize)> + 'a {
    (0..probs.nrows()).map(move |i| (probs.index_axis_move(Axis(0), i), labels[i]))
}

pub fn accuracy(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64, MetricsError> {
    check(probs, labels)?;
    let correct = rows(probs, labels).filter(|(p, y)| argmax(*p) == *y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Bin index for a confidence in `[0, 1]` under right-closed bins.
pub fn ece_bin(confidence: f64, n_bins: usize) -> usize {
    let scaled = (confidence * n_bins as f64).ceil() as usize;
    scaled.saturating_sub(1).min(n_bins - 1)
}

pub fn ece(probs: ArrayView2<f64>, labels: &[usize], n_bins: usize) -> Result<f64, MetricsError> {
    check(probs, labels)?;
    if n_bins == 0 {
        return Err(MetricsError::NoBins);
    }
    let mut count = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    for (p, y) in rows(probs, labels) {
        let conf = max_prob(p);
        let b = ece_bin(conf, n_bins);
        count[b] += 1;
        conf_sum[b] += conf;
        if argmax(p) == y {
            correct[b] += 1;
        }
    }
    let n = labels.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (correct[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

pub fn nll(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64, MetricsError> {
    check(probs, labels)?;
    Ok(-rows(probs, labels).map(|(p, y)| safe_ln(p[y])).sum::<f64>() / labels.len() as f64)
}

pub fn brier(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64, MetricsError> {
    check(probs, labels)?;
    let total: f64 = rows(probs, labels)
        .map(|(p, y)| {
            p.iter()
                .enumerate()
                .map(|(k, &pk)| {
                    let target = if k == y { 1.0 } else { 0.0 };
                    (pk - target) * (pk - target)
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / labels.len() as f64)
}

pub fn evaluate(probs: ArrayView2<f64>, labels: &[usize], n_bins: usize) -> Result<EvalReport, MetricsError> {
    Ok(EvalReport {
        accuracy: accuracy(probs, labels)?,
        ece: ece(probs, labels, n_bins)?,
        nll: nll(probs, labels)?,
        brier: brier(probs, labels)?,
        n_bins,
        n_samples: labels.len(),
    })
}
