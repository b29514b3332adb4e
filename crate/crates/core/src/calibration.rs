//! Calibration-regularised training objectives.
//!
//! The training loss is cross-entropy plus a label-smoothing term that pulls
//! predictions toward the uniform distribution, gated per sample by either
//! the disagreement between stochastic forward passes (VWCC, weight `alpha`)
//! or by confidence/correctness of the prediction (LWCC, weight `beta`).
//! Both weights are treated as constants when differentiating.
//!
//! Gradient helpers return derivatives with respect to the logits, which is
//! what the MLP backward pass consumes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::prob::{self, check_distribution, safe_ln, NotADistribution};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibError {
    #[error(transparent)]
    NotADistribution(#[from] NotADistribution),
    #[error("need at least 2 stochastic passes, got {0}")]
    TooFewPasses(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("invalid calibration spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CalibKind {
    #[default]
    None,
    Vwcc,
    Lwcc,
}

/// Which objective to train with.
///
/// `lambda` weights the smoothing term. For LWCC it multiplies the
/// `beta`-weighted KL term; for VWCC it multiplies the `alpha`-weighted KL
/// term, so `lambda = 1` is the plain variance-weighted objective. A zero
/// `lambda` switches the regulariser off entirely and training falls back to
/// single-pass mean cross-entropy for either kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibSpec {
    pub kind: CalibKind,
    pub lambda: f64,
    /// Stochastic passes per sample (VWCC only).
    pub passes: usize,
}

impl Default for CalibSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl CalibSpec {
    pub const DEFAULT_LAMBDA: f64 = 1.0;
    pub const DEFAULT_PASSES: usize = 10;

    pub fn none() -> Self {
        Self { kind: CalibKind::None, lambda: 0.0, passes: 1 }
    }

    pub fn vwcc(lambda: f64, passes: usize) -> Self {
        Self { kind: CalibKind::Vwcc, lambda, passes }
    }

    pub fn lwcc(lambda: f64) -> Self {
        Self { kind: CalibKind::Lwcc, lambda, passes: 1 }
    }

    pub fn validate(&self) -> Result<(), CalibError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(CalibError::InvalidSpec(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.kind == CalibKind::Vwcc && self.passes < 2 {
            return Err(CalibError::TooFewPasses(self.passes));
        }
        Ok(())
    }

    /// Whether the smoothing term contributes at all.
    pub fn is_active(&self) -> bool {
        self.kind != CalibKind::None && self.lambda > 0.0
    }

    /// Forward passes needed per sample during training.
    pub fn training_passes(&self) -> usize {
        if self.is_active() && self.kind == CalibKind::Vwcc {
            self.passes
        } else {
            1
        }
    }
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<(), CalibError> {
    if labels.len() != n {
        return Err(CalibError::ShapeMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(CalibError::LabelOutOfRange { label, num_classes: k });
    }
    Ok(())
}

/// `KL(U || p) = (1/K) sum_k ln((1/K) / p_k)` without validation.
fn kl_uniform_unchecked(p: ArrayView1<f64>) -> f64 {
    let k = p.len() as f64;
    let log_u = (1.0 / k).ln();
    p.iter().map(|&pk| log_u - safe_ln(pk)).sum::<f64>() / k
}

/// KL divergence from the uniform distribution to `p`, in nats.
pub fn kl_to_uniform(p: ArrayView1<f64>) -> Result<f64, CalibError> {
    check_distribution(p)?;
    Ok(kl_uniform_unchecked(p))
}

/// Bhattacharyya coefficient `sum_k sqrt(p_k q_k)`.
pub fn bhattacharyya(p: ArrayView1<f64>, q: ArrayView1<f64>) -> Result<f64, CalibError> {
    if p.len() != q.len() {
        return Err(CalibError::ShapeMismatch(format!("{} vs {} classes", p.len(), q.len())));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(bc_unchecked(p, q))
}

fn bc_unchecked(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    p.iter().zip(q.iter()).map(|(&a, &b)| (a * b).sqrt()).sum()
}

fn alpha_unchecked(passes: &[ArrayView1<f64>]) -> f64 {
    let first = passes[0];
    if passes[1..].iter().all(|p| p == first) {
        return 0.0;
    }
    let mean = prob::mean_distribution(passes.iter().copied());
    let mean_bc =
        passes.iter().map(|p| bc_unchecked(*p, mean.view())).sum::<f64>() / passes.len() as f64;
    (1.0 - mean_bc).clamp(0.0, 1.0)
}

/// Disagreement of `T` stochastic predictions for one sample:
/// `1 - mean_t BC(p_t, mean_p)`, clamped to `[0, 1]`.
pub fn variance_weight(passes: &[ArrayView1<f64>]) -> Result<f64, CalibError> {
    if passes.len() < 2 {
        return Err(CalibError::TooFewPasses(passes.len()));
    }
    let k = passes[0].len();
    for p in passes {
        if p.len() != k {
            return Err(CalibError::ShapeMismatch("passes differ in class count".into()));
        }
        check_distribution(*p)?;
    }
    Ok(alpha_unchecked(passes))
}

fn check_passes(passes: &[ArrayView2<f64>], labels: &[usize]) -> Result<(usize, usize), CalibError> {
    let (n, k) = passes
        .first()
        .map(|p| p.dim())
        .ok_or(CalibError::TooFewPasses(0))?;
    if passes.iter().any(|p| p.dim() != (n, k)) {
        return Err(CalibError::ShapeMismatch("passes differ in shape".into()));
    }
    check_labels(labels, n, k)?;
    Ok((n, k))
}

/// Per-sample `alpha` from `T` pass matrices `[n, K]`.
pub fn variance_weights(passes: &[ArrayView2<f64>]) -> Vec<f64> {
    let n = passes[0].nrows();
    let mut rows = Vec::with_capacity(passes.len());
    (0..n)
        .map(|i| {
            rows.clear();
            rows.extend(passes.iter().map(|p| p.row(i)));
            if rows.len() < 2 {
                0.0
            } else {
                alpha_unchecked(&rows)
            }
        })
        .collect()
}

/// Variance-weighted confidence calibration loss over `T` stochastic passes:
///
/// `(1/M) sum_i sum_t [ -(1 - a_i) ln p_t(y_i) + lambda a_i KL(U || p_t) ]`
///
/// Returns the loss and the per-sample weights `a_i`.
pub fn vwcc_loss(
    passes: &[ArrayView2<f64>],
    labels: &[usize],
    lambda: f64,
) -> Result<(f64, Vec<f64>), CalibError> {
    let (n, _) = check_passes(passes, labels)?;
    if passes.len() < 2 {
        return Err(CalibError::TooFewPasses(passes.len()));
    }
    let alphas = variance_weights(passes);
    let loss = vwcc_loss_weighted(passes, labels, &alphas, lambda);
    debug_assert!(n == alphas.len());
    Ok((loss, alphas))
}

/// [`vwcc_loss`] with caller-supplied weights `alphas`.
pub fn vwcc_loss_weighted(
    passes: &[ArrayView2<f64>],
    labels: &[usize],
    alphas: &[f64],
    lambda: f64,
) -> f64 {
    let mut total = 0.0;
    for p in passes {
        for (i, row) in p.axis_iter(Axis(0)).enumerate() {
            let a = alphas[i];
            total += -(1.0 - a) * safe_ln(row[labels[i]]) + lambda * a * kl_uniform_unchecked(row);
        }
    }
    total / labels.len().max(1) as f64
}

/// Gradients of [`vwcc_loss`] with respect to each pass's logits, with the
/// weights `alphas` held fixed.
pub fn vwcc_logit_grads(
    passes: &[ArrayView2<f64>],
    labels: &[usize],
    alphas: &[f64],
    lambda: f64,
) -> Vec<Array2<f64>> {
    let n = labels.len() as f64;
    passes
        .iter()
        .map(|p| {
            let k = p.ncols() as f64;
            let mut g = p.to_owned();
            for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
                let a = alphas[i];
                // (1-a)(p - e_y) + lambda a (p - u)
                let scale = (1.0 - a) + lambda * a;
                row.mapv_inplace(|v| scale * v - lambda * a / k);
                row[labels[i]] -= 1.0 - a;
                row.mapv_inplace(|v| v / n);
            }
            g
        })
        .collect()
}

/// `beta = (1 - max p)` when the prediction is correct, `1` otherwise.
pub fn likelihood_weight(p: ArrayView1<f64>, true_label: usize, predicted_label: usize) -> f64 {
    if true_label == predicted_label {
        1.0 - prob::max_prob(p)
    } else {
        1.0
    }
}

/// Likelihood-weighted confidence calibration loss:
///
/// `(1/n) sum_i [ -ln p_i(y_i) + lambda beta_i KL(U || p_i) ]`
pub fn lwcc_loss(
    probs: ArrayView2<f64>,
    labels: &[usize],
    lambda: f64,
) -> Result<(f64, Vec<f64>), CalibError> {
    check_labels(labels, probs.nrows(), probs.ncols())?;
    let n = probs.nrows();
    let mut betas = Vec::with_capacity(n);
    let mut total = 0.0;
    for (row, &y) in probs.axis_iter(Axis(0)).zip(labels) {
        let beta = likelihood_weight(row, y, prob::argmax(row));
        betas.push(beta);
        total += -safe_ln(row[y]);
        if lambda != 0.0 {
            total += lambda * beta * kl_uniform_unchecked(row);
        }
    }
    Ok((total / n.max(1) as f64, betas))
}

pub fn lwcc_logit_grad(
    probs: ArrayView2<f64>,
    labels: &[usize],
    betas: &[f64],
    lambda: f64,
) -> Array2<f64> {
    let n = labels.len() as f64;
    let k = probs.ncols() as f64;
    let mut g = probs.to_owned();
    for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
        let w = lambda * betas[i];
        // (p - e_y) + w (p - u)
        row.mapv_inplace(|v| (1.0 + w) * v - w / k);
        row[labels[i]] -= 1.0;
        row.mapv_inplace(|v| v / n);
    }
    g
}

/// Mean cross-entropy `-(1/n) sum ln p_i(y_i)`.
pub fn cross_entropy(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64, CalibError> {
    check_labels(labels, probs.nrows(), probs.ncols())?;
    let n = probs.nrows().max(1) as f64;
    Ok(-probs
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &y)| safe_ln(row[y]))
        .sum::<f64>()
        / n)
}

pub fn cross_entropy_logit_grad(probs: ArrayView2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = labels.len() as f64;
    let mut g = probs.to_owned();
    for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
        row[labels[i]] -= 1.0;
        row.mapv_inplace(|v| v / n);
    }
    g
}

/// Objective value and logit gradient for a training mini-batch.
///
/// `probs` holds `spec.training_passes()` stacked copies of the batch,
/// pass-major: row `t * m + i` is pass `t` of sample `i`.
pub fn objective_and_grad(
    spec: &CalibSpec,
    probs: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>), CalibError> {
    let passes = spec.training_passes();
    let m = labels.len();
    if probs.nrows() != passes * m {
        return Err(CalibError::ShapeMismatch(format!(
            "{} rows for {passes} passes of {m} samples",
            probs.nrows()
        )));
    }
    if !spec.is_active() {
        let loss = cross_entropy(probs, labels)?;
        return Ok((loss, cross_entropy_logit_grad(probs, labels)));
    }
    match spec.kind {
        CalibKind::Lwcc => {
            let (loss, betas) = lwcc_loss(probs, labels, spec.lambda)?;
            Ok((loss, lwcc_logit_grad(probs, labels, &betas, spec.lambda)))
        }
        CalibKind::Vwcc => {
            let views: Vec<ArrayView2<f64>> = (0..passes)
                .map(|t| probs.slice(ndarray::s![t * m..(t + 1) * m, ..]))
                .collect();
            let (loss, alphas) = vwcc_loss(&views, labels, spec.lambda)?;
            let grads = vwcc_logit_grads(&views, labels, &alphas, spec.lambda);
            let grad_views: Vec<ArrayView2<f64>> = grads.iter().map(|g| g.view()).collect();
            let stacked = ndarray::concatenate(Axis(0), &grad_views).expect("same widths");
            Ok((loss, stacked))
        }
        CalibKind::None => unreachable!("inactive specs return early"),
    }
}

/// Uniform distribution over `k` classes.
pub fn uniform(k: usize) -> Array1<f64> {
    Array1::from_elem(k, 1.0 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_to_uniform(array![0.5, 0.5].view()).unwrap(), 0.0);
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let kl = kl_to_uniform(array![0.9, 0.1].view()).unwrap();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.5108).abs() < 1e-4);
        assert!(matches!(
            kl_to_uniform(array![0.7, 0.4].view()),
            Err(CalibError::NotADistribution(_))
        ));
    }

    #[test]
    fn bhattacharyya_examples() {
        let p = array![0.2, 0.3, 0.5];
        assert!((bhattacharyya(p.view(), p.view()).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bhattacharyya(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(), 0.0);
        let bc = bhattacharyya(array![0.5, 0.5].view(), array![0.9, 0.1].view()).unwrap();
        assert!((bc - (0.45f64.sqrt() + 0.05f64.sqrt())).abs() < 1e-12);
        assert!((bc - 0.8944).abs() < 1e-4);
    }

    #[test]
    fn alpha_examples() {
        let p = array![0.3, 0.7];
        assert_eq!(variance_weight(&[p.view(), p.view(), p.view()]).unwrap(), 0.0);
        let a = array![1.0, 0.0];
        let b = array![0.0, 1.0];
        let alpha = variance_weight(&[a.view(), b.view()]).unwrap();
        assert!((alpha - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
        assert!(matches!(variance_weight(&[a.view()]), Err(CalibError::TooFewPasses(1))));
    }

    #[test]
    fn vwcc_with_identical_passes_is_t_times_ce() {
        let p = array![[0.5, 0.5]];
        let (loss, alphas) = vwcc_loss(&[p.view(), p.view()], &[0], 1.0).unwrap();
        assert_eq!(alphas, vec![0.0]);
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn vwcc_full_disagreement_is_pure_smoothing() {
        let p = array![[0.8, 0.2]];
        let q = array![[0.4, 0.6]];
        let loss = vwcc_loss_weighted(&[p.view(), q.view()], &[0], &[1.0], 1.0);
        let kl = kl_to_uniform(p.row(0)).unwrap() + kl_to_uniform(q.row(0)).unwrap();
        assert!((loss - kl).abs() < 1e-12);
        let g = vwcc_logit_grads(&[p.view()], &[0], &[1.0], 1.0);
        assert!((g[0][[0, 0]] - 0.3).abs() < 1e-12);
        assert!((g[0][[0, 1]] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn beta_examples() {
        let p = array![0.9, 0.1];
        assert!((likelihood_weight(p.view(), 0, 0) - 0.1).abs() < 1e-12);
        assert_eq!(likelihood_weight(p.view(), 1, 0), 1.0);
        assert_eq!(likelihood_weight(array![1.0, 0.0].view(), 0, 0), 0.0);
    }

    #[test]
    fn lwcc_examples() {
        let p = array![[0.9, 0.1]];
        let (loss, betas) = lwcc_loss(p.view(), &[1], 1.0).unwrap();
        assert_eq!(betas, vec![1.0]);
        let kl = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((loss - (-(0.1f64).ln() + kl)).abs() < 1e-12);
        assert!((loss - 2.8134).abs() < 1e-4);

        let probs = array![[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]];
        let (off, _) = lwcc_loss(probs.view(), &[0, 1], 0.0).unwrap();
        assert_eq!(off, cross_entropy(probs.view(), &[0, 1]).unwrap());

        let confident = array![[1.0, 0.0], [0.0, 1.0]];
        let (loss, betas) = lwcc_loss(confident.view(), &[0, 1], 5.0).unwrap();
        assert_eq!(betas, vec![0.0, 0.0]);
        assert_eq!(loss, cross_entropy(confident.view(), &[0, 1]).unwrap());
    }

    #[test]
    fn shape_errors() {
        let p = array![[0.5, 0.5]];
        assert!(matches!(lwcc_loss(p.view(), &[0, 1], 1.0), Err(CalibError::ShapeMismatch(_))));
        assert!(matches!(lwcc_loss(p.view(), &[2], 1.0), Err(CalibError::LabelOutOfRange { .. })));
        let q = array![[0.5, 0.5], [0.5, 0.5]];
        assert!(matches!(
            vwcc_loss(&[p.view(), q.view()], &[0], 1.0),
            Err(CalibError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(CalibSpec::vwcc(1.0, 1).validate().is_err());
        assert!(CalibSpec::lwcc(-1.0).validate().is_err());
        assert!(CalibSpec::vwcc(1.0, 10).validate().is_ok());
        assert_eq!(CalibSpec::vwcc(0.0, 10).training_passes(), 1);
        assert_eq!(CalibSpec::vwcc(1.0, 10).training_passes(), 10);
    }

    #[test]
    fn inactive_objective_is_plain_ce() {
        let probs = array![[0.6, 0.4], [0.3, 0.7]];
        for spec in [CalibSpec::none(), CalibSpec::lwcc(0.0), CalibSpec::vwcc(0.0, 4)] {
            let (loss, grad) = objective_and_grad(&spec, probs.view(), &[0, 0]).unwrap();
            assert_eq!(loss, cross_entropy(probs.view(), &[0, 0]).unwrap());
            assert_eq!(grad, cross_entropy_logit_grad(probs.view(), &[0, 0]));
        }
    }
}
