//! The active-learning loop and multi-trial experiments.
//!
//! A trial runs `budget / batch_size` selection rounds. Each trains a fresh
//! model on the labeled set, evaluates it on the test split, picks a query
//! batch from the unlabeled pool, asks the oracle and commits the answers.
//! A last evaluation-only round then trains on the final labeled set, so a
//! trial yields `budget / batch_size + 1` records with labeled counts
//! `S, S + b, ..., S + B`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibError, CalibSpec};
use crate::data::{init_pools, load_idx, DataError, Dataset, Images, PoolError, PoolState, Split};
use crate::embedding::{grad_embed, EmbeddingError};
use crate::metrics::{evaluate, EvalReport, MetricsError, DEFAULT_ECE_BINS};
use crate::model::{train, Mlp, ModelError, TrainConfig, INFERENCE_CHUNK};
use crate::oracle::{build_oracle, Oracle, OracleError, OracleSpec};
use crate::prob::argmax_rows;
use crate::pseudolabel::{refine_with_probs, PseudoLabelConfig};
use crate::rng::{stage_rng, Stage};
use crate::sampler::{confidence_select, entropy_select, kmeanspp_select, random_select, QueryBatch, SamplerError};
use crate::session::SessionStore;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("budget exhausted")]
    BudgetExhausted,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    AsklearnVwcc,
    AsklearnLwcc,
    Badge,
    Entropy,
    Confidence,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::AsklearnVwcc,
        Strategy::AsklearnLwcc,
        Strategy::Badge,
        Strategy::Entropy,
        Strategy::Confidence,
        Strategy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::AsklearnVwcc => "asklearn_vwcc",
            Strategy::AsklearnLwcc => "asklearn_lwcc",
            Strategy::Badge => "badge",
            Strategy::Entropy => "entropy",
            Strategy::Confidence => "confidence",
            Strategy::Random => "random",
        }
    }

    /// Training objective. Only the ask-n-learn strategies calibrate.
    pub fn calib_spec(self, cfg: &CalibrationConfig) -> CalibSpec {
        match self {
            Strategy::AsklearnVwcc => CalibSpec::vwcc(cfg.lambda, cfg.passes),
            Strategy::AsklearnLwcc => CalibSpec::lwcc(cfg.lambda),
            _ => CalibSpec::none(),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| EngineError::ConfigInvalid(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Keep only the first n training samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            train_images: "data/mnist/train-images-idx3-ubyte".into(),
            train_labels: "data/mnist/train-labels-idx1-ubyte".into(),
            test_images: "data/mnist/t10k-images-idx3-ubyte".into(),
            test_labels: "data/mnist/t10k-labels-idx1-ubyte".into(),
            train_limit: None,
            test_limit: None,
        }
    }
}

impl DatasetSpec {
    /// Load the train and test splits. Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Dataset), EngineError> {
        let path = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let mut train = load_idx(path(&self.train_images), path(&self.train_labels), Split::Train)?;
        let mut test = load_idx(path(&self.test_images), path(&self.test_labels), Split::Test)?;
        if let Some(n) = self.train_limit {
            train = train.truncate(n);
        }
        if let Some(n) = self.test_limit {
            test = test.truncate(n);
        }
        Ok((train, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub lambda: f64,
    /// Stochastic passes T for VWCC.
    pub passes: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { lambda: CalibSpec::DEFAULT_LAMBDA, passes: CalibSpec::DEFAULT_PASSES }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 256, 256], dropout: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub strategy: Strategy,
    pub seed_size: usize,
    pub batch_size: usize,
    pub budget: usize,
    pub calibration: CalibrationConfig,
    pub pseudo_label: PseudoLabelConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub oracle: OracleSpec,
    pub ece_bins: usize,
    pub trials: usize,
    /// Trial `t` uses seed `seed + t`.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Write a state file after every committed round and resume from it.
    pub checkpoint: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            strategy: Strategy::AsklearnVwcc,
            seed_size: 100,
            batch_size: 100,
            budget: 900,
            calibration: CalibrationConfig::default(),
            pseudo_label: PseudoLabelConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            oracle: OracleSpec::Exact,
            ece_bins: DEFAULT_ECE_BINS,
            trials: 3,
            seed: 0,
            output_dir: "out".into(),
            checkpoint: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        let config: Self = serde_json::from_str(text).map_err(|e| EngineError::ConfigInvalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |msg: String| Err(EngineError::ConfigInvalid(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !self.budget.is_multiple_of(self.batch_size) {
            return bad(format!("budget {} is not a multiple of batch_size {}", self.budget, self.batch_size));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.seed_size == 0 {
            return bad("seed_size must be positive".into());
        }
        if self.ece_bins == 0 {
            return bad("ece_bins must be positive".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.model.dropout));
        }
        if self.model.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        let t = &self.training;
        if t.batch_size == 0 || !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return bad("training needs a positive batch size and learning rate".into());
        }
        let spec = self.calib_spec();
        spec.validate().map_err(|e: CalibError| EngineError::ConfigInvalid(e.to_string()))?;
        if spec.training_passes() > 1 && self.model.dropout == 0.0 {
            return bad("vwcc with lambda > 0 needs dropout > 0".into());
        }
        self.pseudo_label.validate().map_err(EngineError::ConfigInvalid)?;
        self.oracle.validate().map_err(|e| EngineError::ConfigInvalid(e.to_string()))?;
        Ok(())
    }

    pub fn calib_spec(&self) -> CalibSpec {
        self.strategy.calib_spec(&self.calibration)
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_add(trial as u64)
    }

    pub fn layer_dims(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(&self.model.hidden);
        dims.push(classes);
        dims
    }

    pub fn rounds(&self) -> usize {
        self.budget / self.batch_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub labeled_count: usize,
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub wall_ms: u64,
    pub strategy: Strategy,
    pub trial_seed: u64,
}

/// Everything needed to resume a trial after a committed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialState {
    pub config: ExperimentConfig,
    pub trial_seed: u64,
    pub pool: PoolState,
    /// Labels of the labeled set as delivered (so possibly noisy).
    pub labels: BTreeMap<usize, usize>,
    pub corrupted_ids: BTreeSet<usize>,
    pub records: Vec<RoundRecord>,
    pub queries: Vec<QueryBatch>,
}

impl TrialState {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, EngineError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EngineError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.records.len() == self.config.rounds() + 1
    }
}

pub struct Engine {
    config: ExperimentConfig,
    calib: CalibSpec,
    images: Images,
    test_images: Images,
    test_labels: Vec<usize>,
    num_classes: usize,
    oracle: Box<dyn Oracle>,
    session: Option<Arc<SessionStore>>,
    state: TrialState,
    checkpoint_path: Option<PathBuf>,
}

impl Engine {
    /// Start a trial. The training labels go to the oracle; only the labels
    /// of the seed set are read here, since the seed set arrives labeled.
    pub fn new(
        config: ExperimentConfig,
        trial_seed: u64,
        train: Dataset,
        test: Dataset,
        session: Option<Arc<SessionStore>>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let (images, truth) = train.into_parts();
        let mut rng = stage_rng(trial_seed, 0, Stage::Pool);
        let pool = init_pools(images.len(), config.seed_size, config.budget, config.batch_size, &mut rng)?;
        let labels = pool.labeled_ids().iter().map(|&id| (id, truth.as_slice()[id])).collect();
        let state = TrialState {
            config: config.clone(),
            trial_seed,
            pool,
            labels,
            corrupted_ids: BTreeSet::new(),
            records: Vec::new(),
            queries: Vec::new(),
        };
        Self::assemble(config, images, truth.num_classes(), test, session, state, truth)
    }

    /// Continue a trial from a saved state.
    pub fn resume(
        state: TrialState,
        train: Dataset,
        test: Dataset,
        session: Option<Arc<SessionStore>>,
    ) -> Result<Self, EngineError> {
        state.config.validate()?;
        state.pool.check_invariants()?;
        let (images, truth) = train.into_parts();
        if state.pool.total() != images.len() {
            return Err(EngineError::ConfigInvalid(format!(
                "state covers {} samples, dataset has {}",
                state.pool.total(),
                images.len()
            )));
        }
        Self::assemble(state.config.clone(), images, truth.num_classes(), test, session, state, truth)
    }

    fn assemble(
        config: ExperimentConfig,
        images: Images,
        num_classes: usize,
        test: Dataset,
        session: Option<Arc<SessionStore>>,
        state: TrialState,
        truth: crate::data::GroundTruth,
    ) -> Result<Self, EngineError> {
        if test.images.height() != images.height() || test.images.width() != images.width() {
            return Err(EngineError::ConfigInvalid("train and test image sizes differ".into()));
        }
        if let Some(&y) = test.labels.iter().find(|&&y| y >= num_classes) {
            return Err(EngineError::ConfigInvalid(format!("test label {y} with {num_classes} train classes")));
        }
        if test.is_empty() {
            return Err(EngineError::ConfigInvalid("empty test split".into()));
        }
        let oracle = build_oracle(&config.oracle, truth, session.clone())?;
        if let Some(s) = &session {
            s.set_training(state.pool.rounds_completed(), state.pool.labeled_ids().len(), state.pool.budget_remaining());
            for r in &state.records {
                s.push_record(r.clone());
            }
        }
        let (test_images, test_truth) = test.into_parts();
        Ok(Self {
            calib: config.calib_spec(),
            config,
            images,
            test_images,
            test_labels: test_truth.as_slice().to_vec(),
            num_classes,
            oracle,
            session,
            state,
            checkpoint_path: None,
        })
    }

    /// Save the trial state here after every round.
    pub fn set_checkpoint(&mut self, path: impl Into<PathBuf>) {
        self.checkpoint_path = Some(path.into());
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn pool(&self) -> &PoolState {
        &self.state.pool
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.state.records
    }

    pub fn queries(&self) -> &[QueryBatch] {
        &self.state.queries
    }

    pub fn state(&self) -> &TrialState {
        &self.state
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Labels the engine has been given, by sample id.
    pub fn labeled(&self) -> &BTreeMap<usize, usize> {
        &self.state.labels
    }

    pub fn train_images(&self) -> &Images {
        &self.images
    }

    fn seed(&self) -> u64 {
        self.state.trial_seed
    }

    /// Train a fresh model for `round` on the current labeled set.
    pub fn train_model(&self, round: usize) -> Result<Mlp, EngineError> {
        let dims = self.config.layer_dims(self.images.dim(), self.num_classes);
        let mut model = Mlp::new(&dims, self.config.model.dropout, &mut stage_rng(self.seed(), round, Stage::Init))?;
        let ids: Vec<usize> = self.state.labels.keys().copied().collect();
        let y: Vec<usize> = self.state.labels.values().copied().collect();
        let x = self.images.rows(&ids);
        let mut rng = stage_rng(self.seed(), round, Stage::Train);
        train(&mut model, x.view(), &y, &self.calib, &self.config.training, &mut rng)?;
        Ok(model)
    }

    pub fn evaluate(&self, model: &Mlp) -> Result<EvalReport, EngineError> {
        let probs = model.predict_proba(self.test_images.flat())?;
        Ok(evaluate(probs.view(), &self.test_labels, self.config.ece_bins)?)
    }

    /// Softmax outputs and penultimate features for `ids`, in chunks.
    fn predict_ids(&self, model: &Mlp, ids: &[usize]) -> Result<(Array2<f64>, Array2<f64>), EngineError> {
        let mut probs = Vec::new();
        let mut feats = Vec::new();
        for chunk in ids.chunks(INFERENCE_CHUNK) {
            let (p, z) = model.predict(self.images.rows(chunk).view())?;
            probs.push(p);
            feats.push(z);
        }
        let stack = |parts: &[Array2<f64>], width: usize| -> Array2<f64> {
            if parts.is_empty() {
                return Array2::zeros((0, width));
            }
            let views: Vec<ArrayView2<f64>> = parts.iter().map(|a| a.view()).collect();
            concatenate(Axis(0), &views).expect("equal widths")
        };
        Ok((stack(&probs, model.num_classes()), stack(&feats, model.feature_dim())))
    }

    /// Choose the next query batch from the unlabeled pool.
    pub fn select(&self, model: &Mlp, round: usize) -> Result<QueryBatch, EngineError> {
        let ids = self.state.pool.unlabeled_vec();
        let b = self.config.batch_size;
        let mut rng = stage_rng(self.seed(), round, Stage::Select);
        if self.config.strategy == Strategy::Random {
            return Ok(random_select(&ids, b, round, &mut rng)?);
        }
        let (probs, feats) = self.predict_ids(model, &ids)?;
        let pseudo = match self.config.strategy {
            Strategy::Entropy => return Ok(entropy_select(probs.view(), &ids, b, round)?),
            Strategy::Confidence => return Ok(confidence_select(probs.view(), &ids, b, round)?),
            Strategy::Badge => argmax_rows(probs.view()),
            Strategy::AsklearnVwcc | Strategy::AsklearnLwcc => {
                let mut prng = stage_rng(self.seed(), round, Stage::PseudoLabel);
                let view = self.images.view();
                refine_with_probs(model, view, &ids, probs.view(), &self.config.pseudo_label, &mut prng)?.labels
            }
            Strategy::Random => unreachable!("handled above"),
        };
        let embedding = grad_embed(ids, probs.view(), feats.view(), &pseudo, round)?;
        drop(probs);
        drop(feats);
        Ok(kmeanspp_select(&embedding, b, round, &mut rng)?)
    }

    /// One selection round. On error nothing is committed.
    pub fn run_round(&mut self) -> Result<RoundRecord, EngineError> {
        let pool = &self.state.pool;
        if pool.budget_remaining() < self.config.batch_size {
            return Err(EngineError::BudgetExhausted);
        }
        let start = Instant::now();
        let round = pool.rounds_completed();
        let labeled_count = pool.labeled_ids().len();
        if let Some(s) = &self.session {
            s.set_training(round, labeled_count, pool.budget_remaining());
        }
        let model = self.train_model(round)?;
        let report = self.evaluate(&model)?;
        let query = self.select(&model, round)?;
        drop(model);
        self.state.pool.check_query(&query.ids)?;
        let mut orng = stage_rng(self.seed(), round, Stage::Oracle);
        let assignment = self.oracle.annotate(&query, &self.images, &mut orng)?;
        assignment.validate(&query.ids, self.num_classes)?;

        self.state.pool.commit_query(&query.ids)?;
        self.state.labels.extend(assignment.pairs.iter().copied());
        self.state.corrupted_ids.extend(assignment.corrupted_ids.iter().copied());
        self.state.queries.push(query);
        let record = self.record(round, labeled_count, &report, start);
        self.finish_round(record)
    }

    /// Train on the final labeled set and evaluate, without querying.
    pub fn run_final(&mut self) -> Result<RoundRecord, EngineError> {
        let start = Instant::now();
        let round = self.state.pool.rounds_completed();
        let labeled_count = self.state.pool.labeled_ids().len();
        if let Some(s) = &self.session {
            s.set_training(round, labeled_count, self.state.pool.budget_remaining());
        }
        let model = self.train_model(round)?;
        let report = self.evaluate(&model)?;
        let record = self.record(round, labeled_count, &report, start);
        self.finish_round(record)
    }

    fn record(&self, round: usize, labeled_count: usize, report: &EvalReport, start: Instant) -> RoundRecord {
        RoundRecord {
            round,
            labeled_count,
            accuracy: report.accuracy,
            ece: report.ece,
            nll: report.nll,
            brier: report.brier,
            wall_ms: start.elapsed().as_millis() as u64,
            strategy: self.config.strategy,
            trial_seed: self.seed(),
        }
    }

    fn finish_round(&mut self, record: RoundRecord) -> Result<RoundRecord, EngineError> {
        self.state.pool.check_invariants()?;
        self.state.records.push(record.clone());
        if let Some(path) = &self.checkpoint_path {
            self.state.save(path)?;
        }
        if let Some(s) = &self.session {
            s.push_record(record.clone());
        }
        Ok(record)
    }

    /// Run the remaining rounds of the trial and return all records.
    pub fn run_trial(&mut self) -> Result<Vec<RoundRecord>, EngineError> {
        while self.state.pool.budget_remaining() >= self.config.batch_size {
            self.run_round()?;
        }
        if !self.state.is_complete() {
            self.run_final()?;
        }
        if let Some(s) = &self.session {
            s.finish(self.state.pool.labeled_ids().len(), self.state.pool.budget_remaining());
        }
        Ok(self.state.records.clone())
    }
}

pub const CSV_COLUMNS: [&str; 7] = ["round", "labeled_count", "accuracy", "ece", "nll", "brier", "wall_ms"];

fn metric_values(r: &RoundRecord) -> [f64; 5] {
    [r.accuracy, r.ece, r.nll, r.brier, r.wall_ms as f64]
}

pub fn write_trial_csv(path: impl AsRef<Path>, records: &[RoundRecord]) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.labeled_count.to_string(),
            r.accuracy.to_string(),
            r.ece.to_string(),
            r.nll.to_string(),
            r.brier.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn write_aggregate_csv(path: impl AsRef<Path>, trials: &[Vec<RoundRecord>]) -> Result<(), EngineError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["round".to_string(), "labeled_count".to_string()];
    for col in &CSV_COLUMNS[2..] {
        header.push(format!("{col}_mean"));
        header.push(format!("{col}_std"));
    }
    w.write_record(&header)?;
    let rounds = trials.iter().map(Vec::len).min().unwrap_or(0);
    for i in 0..rounds {
        let first = &trials[0][i];
        let mut row = vec![first.round.to_string(), first.labeled_count.to_string()];
        for m in 0..5 {
            let values: Vec<f64> = trials.iter().map(|t| metric_values(&t[i])[m]).collect();
            let (mean, std) = mean_std(&values);
            row.push(mean.to_string());
            row.push(std.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Run trial `trial` of `config`, resuming from its state file when
/// checkpointing is on and the file matches, and write `trial_<t>.csv`.
pub fn run_single_trial(
    config: &ExperimentConfig,
    trial: usize,
    train: Dataset,
    test: Dataset,
    session: Option<Arc<SessionStore>>,
) -> Result<Vec<RoundRecord>, EngineError> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    let seed = config.trial_seed(trial);
    let state_path = config.output_dir.join(format!("trial_{trial}.state.json"));
    let saved = if config.checkpoint && state_path.exists() { TrialState::load(&state_path).ok() } else { None };
    let mut engine = match saved {
        Some(state) if state.config == *config && state.trial_seed == seed => {
            Engine::resume(state, train, test, session)?
        }
        _ => Engine::new(config.clone(), seed, train, test, session)?,
    };
    if config.checkpoint {
        engine.set_checkpoint(&state_path);
    }
    let records = engine.run_trial()?;
    write_trial_csv(config.output_dir.join(format!("trial_{trial}.csv")), &records)?;
    Ok(records)
}

/// Run every trial of `config` on already loaded splits, writing
/// `trial_<t>.csv` for each trial and `aggregate.csv` into the output
/// directory.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<Vec<RoundRecord>>, EngineError> {
    config.validate()?;
    let mut all = Vec::with_capacity(config.trials);
    for t in 0..config.trials {
        all.push(run_single_trial(config, t, train.clone(), test.clone(), None)?);
    }
    write_aggregate_csv(config.output_dir.join("aggregate.csv"), &all)?;
    Ok(all)
}

/// Load the dataset named by `config` (relative to the working directory)
/// and run the experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<Vec<RoundRecord>>, EngineError> {
    config.validate()?;
    let (train, test) = config.dataset.load(Path::new("."))?;
    run_experiment_with(config, &train, &test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("bald".parse::<Strategy>().is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!((c.seed_size, c.batch_size, c.budget, c.trials), (100, 100, 900, 3));
        assert_eq!(c.rounds(), 9);
        assert_eq!(c.layer_dims(784, 10), vec![784, 256, 256, 256, 10]);
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"budget": 905}"#),
            Err(EngineError::ConfigInvalid(_))
        ));
        assert!(ExperimentConfig::from_json(r#"{"trials": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"budgt": 900}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"model": {"dropout": 0.0}}"#).is_err());
        let ok = ExperimentConfig::from_json(r#"{"model": {"dropout": 0.0}, "calibration": {"lambda": 0.0}}"#);
        assert!(ok.is_ok());
    }

    #[test]
    fn badge_and_baselines_train_with_plain_ce() {
        let cal = CalibrationConfig::default();
        for s in [Strategy::Badge, Strategy::Entropy, Strategy::Confidence, Strategy::Random] {
            assert!(!s.calib_spec(&cal).is_active());
        }
        assert_eq!(Strategy::AsklearnVwcc.calib_spec(&cal).training_passes(), 10);
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
