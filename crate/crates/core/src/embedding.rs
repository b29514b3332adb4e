//! Per-sample gradient embeddings.
//!
//! For a sample with softmax output `p`, pseudo-label `y` and penultimate
//! features `z`, the cross-entropy gradient with respect to the last-layer
//! weights is the outer product `(p - e_y) z^T`. Row `j` of the embedding is
//! that matrix flattened class-major: block `i` is `(p_i - [y = i]) z`.
//!
//! Rows are kept in factored form (`coefficients = p - e_y` and `features = z`)
//! because every quantity the sampler needs follows from the factors:
//! `<g_a, g_b> = <c_a, c_b> <z_a, z_b>`. A dense row has `K * d_z` entries,
//! which for a 60k pool is over a gigabyte.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::model::Mlp;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("pseudo-label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEmbedding {
    /// Sample ids, one per row.
    pub ids: Vec<usize>,
    /// `p - e_y`, `[n, K]`.
    pub coefficients: Array2<f64>,
    /// `z`, `[n, d_z]`.
    pub features: Array2<f64>,
    pub pseudo_labels: Vec<usize>,
    pub source_round: usize,
}

/// Build embeddings from softmax outputs, penultimate features and
/// pseudo-labels. Only the cross-entropy gradient is used, whatever loss the
/// model was trained with.
pub fn grad_embed(
    ids: Vec<usize>,
    probs: ArrayView2<f64>,
    penultimate: ArrayView2<f64>,
    pseudo_labels: &[usize],
    source_round: usize,
) -> Result<GradEmbedding, EmbeddingError> {
    let (n, k) = probs.dim();
    if penultimate.nrows() != n || pseudo_labels.len() != n || ids.len() != n {
        return Err(EmbeddingError::ShapeMismatch(format!(
            "{n} prob rows, {} feature rows, {} labels, {} ids",
            penultimate.nrows(),
            pseudo_labels.len(),
            ids.len()
        )));
    }
    if let Some(&label) = pseudo_labels.iter().find(|&&y| y >= k) {
        return Err(EmbeddingError::LabelOutOfRange { label, num_classes: k });
    }
    let mut coefficients = probs.to_owned();
    for (mut row, &y) in coefficients.axis_iter_mut(Axis(0)).zip(pseudo_labels) {
        row[y] -= 1.0;
    }
    Ok(GradEmbedding {
        ids,
        coefficients,
        features: penultimate.to_owned(),
        pseudo_labels: pseudo_labels.to_vec(),
        source_round,
    })
}

impl GradEmbedding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.coefficients.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Embedding width `K * d_z`.
    pub fn dim(&self) -> usize {
        self.num_classes() * self.feature_dim()
    }

    /// Materialise row `j`.
    pub fn row(&self, j: usize) -> Array1<f64> {
        outer_flat(self.coefficients.row(j), self.features.row(j))
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), self.dim()));
        for (j, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.assign(&self.row(j));
        }
        out
    }

    /// Squared norm of every row: `|c|^2 |z|^2`.
    pub fn sq_norms(&self) -> Array1<f64> {
        let c = self.coefficients.map_axis(Axis(1), |r| r.dot(&r));
        let z = self.features.map_axis(Axis(1), |r| r.dot(&r));
        c * z
    }

    pub fn row_norm(&self, j: usize) -> f64 {
        let c = self.coefficients.row(j);
        let z = self.features.row(j);
        c.dot(&c).sqrt() * z.dot(&z).sqrt()
    }

    /// Squared distances from every row to row `center`, written into `out`.
    pub fn sq_distances_to(&self, center: usize, sq_norms: ArrayView1<f64>, out: &mut [f64]) {
        let cc = self.coefficients.dot(&self.coefficients.row(center));
        let zz = self.features.dot(&self.features.row(center));
        let nc = sq_norms[center];
        for (j, d) in out.iter_mut().enumerate() {
            *d = (sq_norms[j] + nc - 2.0 * cc[j] * zz[j]).max(0.0);
        }
        out[center] = 0.0;
    }
}

fn outer_flat(c: ArrayView1<f64>, z: ArrayView1<f64>) -> Array1<f64> {
    let d = z.len();
    let mut out = Array1::zeros(c.len() * d);
    for (i, &ci) in c.iter().enumerate() {
        out.slice_mut(ndarray::s![i * d..(i + 1) * d]).assign(&(&z * ci));
    }
    out
}

/// Compare the embedding of one sample against the last-layer weight
/// gradient that backprop computes for cross-entropy at `pseudo_label`.
/// Bias gradients are not part of the embedding and are not compared.
///
/// Returns `max |g_embed - g_backprop| / max |g_backprop|`, or the absolute
/// discrepancy when the backprop gradient is identically zero.
pub fn verify_against_backprop(model: &Mlp, sample: ArrayView1<f64>, pseudo_label: usize) -> f64 {
    let x = sample.insert_axis(Axis(0));
    let trace = model.forward_eval(x).expect("sample width matches the model");
    let mut dlogits = trace.probs.clone();
    dlogits[[0, pseudo_label]] -= 1.0;
    let grads = model.backward(&trace, dlogits.view());
    // last layer weights are [d_z, K]; the embedding is class-major
    let backprop: Vec<f64> = grads.weights.last().expect("at least one layer").t().iter().copied().collect();

    let emb = grad_embed(vec![0], trace.probs.view(), trace.penultimate(), &[pseudo_label], 0)
        .expect("shapes come from the model");
    let row = emb.row(0);
    let scale = backprop.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = row.iter().zip(backprop.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    #[test]
    fn one_hot_prediction_gives_zero_row() {
        let e = grad_embed(vec![4], array![[1.0, 0.0, 0.0]].view(), array![[3.0, -1.0]].view(), &[0], 0).unwrap();
        assert!(e.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(e.row_norm(0), 0.0);
    }

    #[test]
    fn hand_evaluated_row() {
        let e = grad_embed(vec![0], array![[0.5, 0.3, 0.2]].view(), array![[1.0, 2.0]].view(), &[0], 0).unwrap();
        let expected = array![-0.5, -1.0, 0.3, 0.6, 0.2, 0.4];
        for (a, b) in e.row(0).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn norm_factorises() {
        let p = array![[0.1, 0.6, 0.3], [0.25, 0.25, 0.5]];
        let z = array![[1.0, -2.0, 0.5, 3.0], [0.0, 0.1, 0.2, 0.3]];
        let e = grad_embed(vec![0, 1], p.view(), z.view(), &[1, 2], 0).unwrap();
        for j in 0..2 {
            let dense = e.row(j);
            let direct = dense.dot(&dense).sqrt();
            assert!((direct - e.row_norm(j)).abs() < 1e-12);
            assert!((e.sq_norms()[j] - direct * direct).abs() < 1e-12);
        }
    }

    #[test]
    fn factored_distances_match_dense() {
        let p = array![[0.1, 0.6, 0.3], [0.25, 0.25, 0.5], [0.9, 0.05, 0.05]];
        let z = array![[1.0, -2.0], [0.0, 0.1], [4.0, 1.0]];
        let e = grad_embed(vec![0, 1, 2], p.view(), z.view(), &[1, 2, 0], 0).unwrap();
        let dense = e.to_dense();
        let norms = e.sq_norms();
        let mut out = vec![0.0; 3];
        e.sq_distances_to(1, norms.view(), &mut out);
        for (j, d) in out.iter().enumerate() {
            let diff = &dense.row(j) - &dense.row(1);
            assert!((d - diff.dot(&diff)).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        let p = array![[0.5, 0.5]];
        let z = array![[1.0]];
        assert!(matches!(
            grad_embed(vec![0], p.view(), z.view(), &[2], 0),
            Err(EmbeddingError::LabelOutOfRange { label: 2, num_classes: 2 })
        ));
        assert!(matches!(
            grad_embed(vec![0, 1], p.view(), z.view(), &[0], 0),
            Err(EmbeddingError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn backprop_oracle_agrees() {
        let model = Mlp::new(&[6, 5, 4, 3], 0.3, &mut seeded(2)).unwrap();
        let x = array![0.2, -0.1, 0.7, 0.0, 1.0, 0.4];
        for y in 0..3 {
            assert!(verify_against_backprop(&model, x.view(), y) < 1e-12);
        }
    }

    #[test]
    fn binary_norm_shrinks_with_confidence() {
        let z = array![[0.3, 1.2, -0.7]];
        let mut last = f64::INFINITY;
        for step in 0..=50 {
            let q = 0.5 + step as f64 * 0.01;
            let e = grad_embed(vec![0], array![[q, 1.0 - q]].view(), z.view(), &[0], 0).unwrap();
            let norm = e.row_norm(0);
            assert!(norm < last);
            last = norm;
        }
        assert_eq!(last, 0.0);
    }
}
