//! Batch active learning for image classification using gradient embeddings
//! computed from calibrated models and refined pseudo-labels.
//!
//! The pipeline per round: train a fresh MLP on the labeled set, evaluate it,
//! pseudo-label the unlabeled pool (averaging over augmentations when the
//! model is unsure), embed each pool sample as its last-layer cross-entropy
//! gradient, pick a diverse batch with k-means++ seeding, ask the oracle, and
//! move the batch into the labeled set.

pub mod calibration;
pub mod data;
pub mod embedding;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod prob;
pub mod pseudolabel;
pub mod rng;
pub mod sampler;
pub mod session;

pub use calibration::{CalibKind, CalibSpec};
pub use data::{Dataset, GroundTruth, Images, PoolState, Split};
pub use embedding::GradEmbedding;
pub use engine::{Engine, ExperimentConfig, RoundRecord, Strategy};
pub use metrics::EvalReport;
pub use model::{Mlp, Mode, TrainConfig};
pub use oracle::{LabelAssignment, Oracle, OracleSpec};
pub use pseudolabel::PseudoLabelReport;
pub use sampler::QueryBatch;
pub use session::{SessionSnapshot, SessionStatus, SessionStore};
