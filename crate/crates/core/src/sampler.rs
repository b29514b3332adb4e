//! Query batch selection.
//!
//! k-means++ here is seeding only: the `b` seeds are the `b` queries.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::GradEmbedding;
use crate::prob::{entropy, max_prob};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SamplerError {
    #[error("batch of {requested} requested from {available} candidates")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite embedding row {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    KmeansPlusPlus,
    Entropy,
    Confidence,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBatch {
    pub ids: Vec<usize>,
    pub method: SelectionMethod,
    pub round: usize,
}

/// Anything k-means++ can seed over: a finite set of points with squared
/// Euclidean distances.
pub trait PointSet {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Squared distance from every point to point `center`.
    fn sq_distances_to(&self, center: usize, out: &mut [f64]);

    fn check_finite(&self) -> Result<(), SamplerError>;
}

/// Dense points, one per row.
pub struct DensePoints<'a>(pub ArrayView2<'a, f64>);

impl PointSet for DensePoints<'_> {
    fn len(&self) -> usize {
        self.0.nrows()
    }

    fn sq_distances_to(&self, center: usize, out: &mut [f64]) {
        let c = self.0.row(center);
        for (d, row) in out.iter_mut().zip(self.0.axis_iter(Axis(0))) {
            *d = row.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }

    fn check_finite(&self) -> Result<(), SamplerError> {
        match self.0.axis_iter(Axis(0)).position(|r| r.iter().any(|v| !v.is_finite())) {
            Some(j) => Err(SamplerError::NonFinite(j)),
            None => Ok(()),
        }
    }
}

/// Gradient embeddings with cached row norms.
pub struct EmbeddingPoints<'a> {
    embedding: &'a GradEmbedding,
    sq_norms: Array1<f64>,
}

impl<'a> EmbeddingPoints<'a> {
    pub fn new(embedding: &'a GradEmbedding) -> Self {
        Self { embedding, sq_norms: embedding.sq_norms() }
    }
}

impl PointSet for EmbeddingPoints<'_> {
    fn len(&self) -> usize {
        self.embedding.len()
    }

    fn sq_distances_to(&self, center: usize, out: &mut [f64]) {
        self.embedding.sq_distances_to(center, self.sq_norms.view(), out);
    }

    fn check_finite(&self) -> Result<(), SamplerError> {
        let e = self.embedding;
        for j in 0..e.len() {
            if e.coefficients.row(j).iter().chain(e.features.row(j).iter()).any(|v| !v.is_finite()) {
                return Err(SamplerError::NonFinite(j));
            }
        }
        Ok(())
    }
}

fn ensure_fits(requested: usize, available: usize) -> Result<(), SamplerError> {
    if requested > available {
        return Err(SamplerError::BatchTooLarge { requested, available });
    }
    Ok(())
}

/// k-means++ seeding returning row indices. The first seed is `first` if
/// given, otherwise uniform; every later seed is drawn with probability
/// proportional to its squared distance to the nearest chosen seed. When all
/// remaining points sit on chosen seeds the draw falls back to uniform over
/// the unchosen points.
pub fn kmeanspp_indices<P: PointSet + ?Sized, R: Rng + ?Sized>(
    points: &P,
    b: usize,
    first: Option<usize>,
    rng: &mut R,
) -> Result<Vec<usize>, SamplerError> {
    let n = points.len();
    ensure_fits(b, n)?;
    points.check_finite()?;
    if b == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = vec![false; n];
    let mut picks = Vec::with_capacity(b);
    let mut nearest = vec![f64::INFINITY; n];
    let mut scratch = vec![0.0; n];

    let mut center = match first {
        Some(i) if i < n => i,
        Some(i) => return Err(SamplerError::ShapeMismatch(format!("first seed {i} of {n} points"))),
        None => rng.random_range(0..n),
    };
    loop {
        chosen[center] = true;
        picks.push(center);
        if picks.len() == b {
            break;
        }
        points.sq_distances_to(center, &mut scratch);
        for (d, &s) in nearest.iter_mut().zip(&scratch) {
            *d = d.min(s);
        }
        let weights: Vec<f64> =
            nearest.iter().zip(&chosen).map(|(&d, &c)| if c { 0.0 } else { d }).collect();
        center = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|&j| !chosen[j]).collect();
                free[rng.random_range(0..free.len())]
            }
        };
    }
    Ok(picks)
}

/// k-means++ seeding over gradient embeddings.
pub fn kmeanspp_select<R: Rng + ?Sized>(
    embedding: &GradEmbedding,
    b: usize,
    round: usize,
    rng: &mut R,
) -> Result<QueryBatch, SamplerError> {
    let picks = kmeanspp_indices(&EmbeddingPoints::new(embedding), b, None, rng)?;
    Ok(QueryBatch {
        ids: picks.into_iter().map(|j| embedding.ids[j]).collect(),
        method: SelectionMethod::KmeansPlusPlus,
        round,
    })
}

fn check_rows(probs: ArrayView2<f64>, ids: &[usize], b: usize) -> Result<(), SamplerError> {
    if probs.nrows() != ids.len() {
        return Err(SamplerError::ShapeMismatch(format!("{} rows for {} ids", probs.nrows(), ids.len())));
    }
    ensure_fits(b, ids.len())
}

/// Ids of the top `b` rows by a score, descending; ties go to the lower id.
fn top_by(scores: Vec<f64>, ids: &[usize], b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &c| scores[c].total_cmp(&scores[a]).then(ids[a].cmp(&ids[c])));
    order.into_iter().take(b).map(|j| ids[j]).collect()
}

/// Highest predictive entropy first.
pub fn entropy_select(
    probs: ArrayView2<f64>,
    ids: &[usize],
    b: usize,
    round: usize,
) -> Result<QueryBatch, SamplerError> {
    check_rows(probs, ids, b)?;
    let scores = probs.axis_iter(Axis(0)).map(entropy).collect();
    Ok(QueryBatch {
        ids: top_by(scores, ids, b),
        method: SelectionMethod::Entropy,
        round,
    })
}

/// Lowest top-class probability first.
pub fn confidence_select(
    probs: ArrayView2<f64>,
    ids: &[usize],
    b: usize,
    round: usize,
) -> Result<QueryBatch, SamplerError> {
    check_rows(probs, ids, b)?;
    let scores = probs.axis_iter(Axis(0)).map(|p: ArrayView1<f64>| -max_prob(p)).collect();
    Ok(QueryBatch {
        ids: top_by(scores, ids, b),
        method: SelectionMethod::Confidence,
        round,
    })
}

/// Uniform sample without replacement.
pub fn random_select<R: Rng + ?Sized>(
    ids: &[usize],
    b: usize,
    round: usize,
    rng: &mut R,
) -> Result<QueryBatch, SamplerError> {
    ensure_fits(b, ids.len())?;
    let picks = rand::seq::index::sample(rng, ids.len(), b);
    Ok(QueryBatch {
        ids: picks.into_iter().map(|j| ids[j]).collect(),
        method: SelectionMethod::Random,
        round,
    })
}
