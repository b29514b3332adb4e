//! Label sources for query batches.
//!
//! Simulated oracles own the training-split ground truth; nothing else in
//! the crate holds it, so the only way a pool label reaches the engine is
//! through [`Oracle::annotate`].

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{GroundTruth, Images};
use crate::rng::StdRng;
use crate::sampler::QueryBatch;
use crate::session::{PendingItem, SessionStore, WaitError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("unknown sample id {0}")]
    UnknownId(usize),
    #[error("invalid oracle spec: {0}")]
    InvalidSpec(String),
    #[error("session closed")]
    SessionClosed,
    #[error("timed out waiting for labels")]
    Timeout,
    #[error("oracle returned a bad assignment: {0}")]
    BadAssignment(String),
}

impl From<WaitError> for OracleError {
    fn from(e: WaitError) -> Self {
        match e {
            WaitError::SessionClosed => OracleError::SessionClosed,
            WaitError::Timeout => OracleError::Timeout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelAssignment {
    /// `(sample id, label)` in query order.
    pub pairs: Vec<(usize, usize)>,
    /// Ids whose label was deliberately corrupted.
    pub corrupted_ids: BTreeSet<usize>,
}

impl LabelAssignment {
    pub fn ids(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(id, _)| id).collect()
    }

    /// Check the assignment answers exactly `query` with labels below `k`.
    pub fn validate(&self, query: &[usize], k: usize) -> Result<(), OracleError> {
        if self.ids() != query {
            return Err(OracleError::BadAssignment("ids differ from the query".into()));
        }
        if let Some(&(id, label)) = self.pairs.iter().find(|&&(_, label)| label >= k) {
            return Err(OracleError::BadAssignment(format!("label {label} for id {id} with {k} classes")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OracleSpec {
    #[default]
    Exact,
    Noisy {
        noise_ratio: f64,
    },
    Human {
        /// Seconds to wait for a full batch; absent means wait forever.
        #[serde(default)]
        timeout_secs: Option<f64>,
    },
}


impl OracleSpec {
    pub fn validate(&self) -> Result<(), OracleError> {
        match *self {
            OracleSpec::Noisy { noise_ratio } if !(0.0..1.0).contains(&noise_ratio) => {
                Err(OracleError::InvalidSpec(format!("noise_ratio must lie in [0, 1), got {noise_ratio}")))
            }
            OracleSpec::Human { timeout_secs: Some(t) } if !(t > 0.0 && t.is_finite()) => {
                Err(OracleError::InvalidSpec(format!("timeout must be positive, got {t}")))
            }
            _ => Ok(()),
        }
    }
}

pub trait Oracle: Send {
    /// Label every id in `query`. `images` is the training split, for oracles
    /// that need to show the samples to someone.
    fn annotate(&mut self, query: &QueryBatch, images: &Images, rng: &mut StdRng)
        -> Result<LabelAssignment, OracleError>;
}

fn true_label(truth: &GroundTruth, id: usize) -> Result<usize, OracleError> {
    truth.label(id).ok_or(OracleError::UnknownId(id))
}

pub fn annotate_exact(query: &QueryBatch, truth: &GroundTruth) -> Result<LabelAssignment, OracleError> {
    let pairs = query.ids.iter().map(|&id| true_label(truth, id).map(|y| (id, y))).collect::<Result<_, _>>()?;
    Ok(LabelAssignment { pairs, corrupted_ids: BTreeSet::new() })
}

/// Number of labels corrupted in a batch of `b` at noise ratio `rho`. Halves
/// round away from zero.
pub fn noisy_count(rho: f64, b: usize) -> usize {
    (rho * b as f64).round() as usize
}

/// Exact labels except for `noisy_count(rho, b)` ids, picked uniformly
/// without replacement, whose label is replaced by one drawn uniformly from
/// the other `K - 1` classes.
pub fn annotate_noisy<R: Rng + ?Sized>(
    query: &QueryBatch,
    truth: &GroundTruth,
    rho: f64,
    rng: &mut R,
) -> Result<LabelAssignment, OracleError> {
    OracleSpec::Noisy { noise_ratio: rho }.validate()?;
    let mut out = annotate_exact(query, truth)?;
    let k = truth.num_classes();
    let count = noisy_count(rho, out.pairs.len());
    if count == 0 || k < 2 {
        return Ok(out);
    }
    for j in rand::seq::index::sample(rng, out.pairs.len(), count) {
        let (id, y) = out.pairs[j];
        let wrong = rng.random_range(0..k - 1);
        out.pairs[j].1 = if wrong >= y { wrong + 1 } else { wrong };
        out.corrupted_ids.insert(id);
    }
    Ok(out)
}

pub struct ExactOracle {
    truth: GroundTruth,
}

impl ExactOracle {
    pub fn new(truth: GroundTruth) -> Self {
        Self { truth }
    }
}

impl Oracle for ExactOracle {
    fn annotate(&mut self, query: &QueryBatch, _: &Images, _: &mut StdRng) -> Result<LabelAssignment, OracleError> {
        annotate_exact(query, &self.truth)
    }
}

pub struct NoisyOracle {
    truth: GroundTruth,
    rho: f64,
}

impl NoisyOracle {
    pub fn new(truth: GroundTruth, rho: f64) -> Result<Self, OracleError> {
        OracleSpec::Noisy { noise_ratio: rho }.validate()?;
        Ok(Self { truth, rho })
    }
}

impl Oracle for NoisyOracle {
    fn annotate(&mut self, query: &QueryBatch, _: &Images, rng: &mut StdRng) -> Result<LabelAssignment, OracleError> {
        annotate_noisy(query, &self.truth, self.rho, rng)
    }
}

/// Labels come from people through the annotation service.
pub struct HumanOracle {
    session: Arc<SessionStore>,
    timeout: Option<Duration>,
}

impl HumanOracle {
    pub fn new(session: Arc<SessionStore>, timeout: Option<Duration>) -> Self {
        Self { session, timeout }
    }
}

impl Oracle for HumanOracle {
    fn annotate(
        &mut self,
        query: &QueryBatch,
        images: &Images,
        _: &mut StdRng,
    ) -> Result<LabelAssignment, OracleError> {
        if let Some(&id) = query.ids.iter().find(|&&id| id >= images.len()) {
            return Err(OracleError::UnknownId(id));
        }
        let items = query
            .ids
            .iter()
            .map(|&id| PendingItem { id, width: images.width(), height: images.height(), pixels: images.to_u8(id) })
            .collect();
        self.session.open_round(query.round, items);
        let labels = self.session.wait_for_labels(self.timeout)?;
        let pairs = query
            .ids
            .iter()
            .map(|id| labels.get(id).map(|&y| (*id, y)).ok_or(OracleError::UnknownId(*id)))
            .collect::<Result<_, _>>()?;
        Ok(LabelAssignment { pairs, corrupted_ids: BTreeSet::new() })
    }
}

/// Build the oracle described by `spec`. Simulated oracles take ownership of
/// the ground truth; the human oracle needs a session and drops it.
pub fn build_oracle(
    spec: &OracleSpec,
    truth: GroundTruth,
    session: Option<Arc<SessionStore>>,
) -> Result<Box<dyn Oracle>, OracleError> {
    spec.validate()?;
    Ok(match *spec {
        OracleSpec::Exact => Box::new(ExactOracle::new(truth)),
        OracleSpec::Noisy { noise_ratio } => Box::new(NoisyOracle::new(truth, noise_ratio)?),
        OracleSpec::Human { timeout_secs } => {
            let session = session.ok_or_else(|| OracleError::InvalidSpec("human oracle needs a session".into()))?;
            Box::new(HumanOracle::new(session, timeout_secs.map(Duration::from_secs_f64)))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::sampler::SelectionMethod;

    fn truth(n: usize, k: usize) -> GroundTruth {
        GroundTruth::new((0..n).map(|i| i % k).collect(), k).unwrap()
    }

    fn batch(ids: Vec<usize>) -> QueryBatch {
        QueryBatch { ids, method: SelectionMethod::Random, round: 0 }
    }

    #[test]
    fn exact_returns_truth() {
        let t = truth(20, 10);
        let a = annotate_exact(&batch(vec![3, 17, 0]), &t).unwrap();
        assert_eq!(a.pairs, vec![(3, 3), (17, 7), (0, 0)]);
        assert!(a.corrupted_ids.is_empty());
        assert_eq!(annotate_exact(&batch(vec![20]), &t), Err(OracleError::UnknownId(20)));
        assert_eq!(annotate_exact(&batch(vec![]), &t).unwrap(), LabelAssignment::default());
    }

    #[test]
    fn noisy_corrupts_exact_count() {
        let t = truth(100, 10);
        let q = batch((0..10).collect());
        let a = annotate_noisy(&q, &t, 0.2, &mut seeded(1)).unwrap();
        assert_eq!(a.corrupted_ids.len(), 2);
        for &(id, y) in &a.pairs {
            assert_eq!(y != t.label(id).unwrap(), a.corrupted_ids.contains(&id));
        }
        let half = annotate_noisy(&batch((0..5).collect()), &t, 0.1, &mut seeded(2)).unwrap();
        assert_eq!(half.corrupted_ids.len(), 1);
    }

    #[test]
    fn zero_noise_is_exact() {
        let t = truth(50, 10);
        let q = batch((10..30).collect());
        assert_eq!(annotate_noisy(&q, &t, 0.0, &mut seeded(3)).unwrap(), annotate_exact(&q, &t).unwrap());
    }

    #[test]
    fn noisy_is_deterministic() {
        let t = truth(200, 10);
        let q = batch((0..100).collect());
        let a = annotate_noisy(&q, &t, 0.1, &mut seeded(4)).unwrap();
        let b = annotate_noisy(&q, &t, 0.1, &mut seeded(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_validation() {
        assert!(OracleSpec::Noisy { noise_ratio: 1.0 }.validate().is_err());
        assert!(OracleSpec::Noisy { noise_ratio: -0.1 }.validate().is_err());
        assert!(OracleSpec::Noisy { noise_ratio: 0.2 }.validate().is_ok());
        let spec: OracleSpec = serde_json::from_str(r#"{"kind":"noisy","noise_ratio":0.1}"#).unwrap();
        assert_eq!(spec, OracleSpec::Noisy { noise_ratio: 0.1 });
        let human: OracleSpec = serde_json::from_str(r#"{"kind":"human"}"#).unwrap();
        assert_eq!(human, OracleSpec::Human { timeout_secs: None });
        assert!(build_oracle(&human, truth(4, 2), None).is_err());
    }

    #[test]
    fn assignment_validation() {
        let a = LabelAssignment { pairs: vec![(1, 0), (2, 3)], corrupted_ids: BTreeSet::new() };
        assert!(a.validate(&[1, 2], 4).is_ok());
        assert!(a.validate(&[1, 2], 3).is_err());
        assert!(a.validate(&[2, 1], 4).is_err());
    }
}
