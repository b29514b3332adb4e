use std::collections::BTreeSet;
use std::sync::Arc;

use asklearn_core::engine::{run_experiment_with, EngineError, TrialState};
use asklearn_core::model::TrainConfig;
use asklearn_core::pseudolabel::PseudoLabelConfig;
use asklearn_core::{
    Dataset, Engine, ExperimentConfig, Images, OracleSpec, RoundRecord, SessionStore, Split, Strategy,
};
use ndarray::Array3;

const K: usize = 4;

/// Quadrant images: class `c` lights up quadrant `c`, plus structured noise.
fn synthetic(n: usize, offset: usize, split: Split) -> Dataset {
    let labels: Vec<usize> = (0..n).map(|i| (i * 5 + offset) % K).collect();
    let pixels = Array3::from_shape_fn((n, 8, 8), |(i, r, c)| {
        let quadrant = (r / 4) * 2 + c / 4;
        let base = if quadrant == labels[i] { 0.7 } else { 0.0 };
        base + ((i * 13 + r * 7 + c * 3 + offset) % 29) as f64 / 100.0
    });
    Dataset::new(Images::new(pixels).unwrap(), labels, K, split).unwrap()
}

fn splits() -> (Dataset, Dataset) {
    (synthetic(160, 0, Split::Train), synthetic(60, 1, Split::Test))
}

fn config(strategy: Strategy) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        strategy,
        seed_size: 12,
        batch_size: 8,
        budget: 24,
        trials: 1,
        checkpoint: false,
        training: TrainConfig { max_epochs: 6, batch_size: 16, ..TrainConfig::default() },
        pseudo_label: PseudoLabelConfig { tau: 0.95, k: 3, ..PseudoLabelConfig::default() },
        ..ExperimentConfig::default()
    };
    c.model.hidden = vec![24, 16];
    c.calibration.passes = 3;
    c
}

fn run(config: &ExperimentConfig, train: Dataset, test: Dataset) -> (Vec<RoundRecord>, TrialState) {
    let mut engine = Engine::new(config.clone(), config.trial_seed(0), train, test, None).unwrap();
    let records = engine.run_trial().unwrap();
    (records, engine.state().clone())
}

fn without_time(records: &[RoundRecord]) -> Vec<RoundRecord> {
    records.iter().map(|r| RoundRecord { wall_ms: 0, ..r.clone() }).collect()
}

fn query_sets(state: &TrialState) -> Vec<BTreeSet<usize>> {
    state.queries.iter().map(|q| q.ids.iter().copied().collect()).collect()
}

#[test]
fn every_strategy_keeps_the_books() {
    for strategy in Strategy::ALL {
        let (train, test) = splits();
        let cfg = config(strategy);
        let (records, state) = run(&cfg, train, test);
        assert_eq!(records.len(), cfg.rounds() + 1, "{strategy}");
        for (r, rec) in records.iter().enumerate() {
            assert_eq!(rec.round, r);
            assert_eq!(rec.labeled_count, cfg.seed_size + r * cfg.batch_size, "{strategy}");
            assert!((0.0..=1.0).contains(&rec.accuracy) && (0.0..=1.0).contains(&rec.ece));
        }
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        for q in &state.queries {
            assert_eq!(q.ids.len(), cfg.batch_size);
            for id in &q.ids {
                assert!(seen.insert(*id), "{strategy} queried {id} twice");
            }
        }
        assert_eq!(state.pool.labeled_ids().len(), cfg.seed_size + cfg.budget);
        assert_eq!(state.pool.budget_remaining(), 0);
        assert!(seen.is_subset(state.pool.labeled_ids()));
        state.pool.check_invariants().unwrap();
        assert!(state.is_complete());
    }
}

#[test]
fn reruns_are_identical() {
    let cfg = config(Strategy::AsklearnVwcc);
    let (a, sa) = run(&cfg, splits().0, splits().1);
    let (b, sb) = run(&cfg, splits().0, splits().1);
    assert_eq!(without_time(&a), without_time(&b));
    assert_eq!(sa.queries, sb.queries);
}

#[test]
fn ablated_asklearn_selects_like_badge() {
    for strategy in [Strategy::AsklearnVwcc, Strategy::AsklearnLwcc] {
        let mut cfg = config(strategy);
        cfg.calibration.lambda = 0.0;
        cfg.pseudo_label.tau = 0.0;
        cfg.model.dropout = 0.0;
        let mut badge = cfg.clone();
        badge.strategy = Strategy::Badge;
        let (ra, sa) = run(&cfg, splits().0, splits().1);
        let (rb, sb) = run(&badge, splits().0, splits().1);
        assert_eq!(query_sets(&sa), query_sets(&sb), "{strategy}");
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(x.accuracy, y.accuracy);
            assert_eq!(x.ece, y.ece);
        }
    }
}

#[test]
fn resumed_trial_matches_uninterrupted_one() {
    let cfg = config(Strategy::AsklearnLwcc);
    let (full, full_state) = run(&cfg, splits().0, splits().1);

    let (train, test) = splits();
    let mut engine = Engine::new(cfg.clone(), cfg.trial_seed(0), train, test, None).unwrap();
    engine.run_round().unwrap();
    engine.run_round().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    engine.state().save(&path).unwrap();
    drop(engine);

    let (train, test) = splits();
    let mut resumed = Engine::resume(TrialState::load(&path).unwrap(), train, test, None).unwrap();
    let records = resumed.run_trial().unwrap();
    assert_eq!(without_time(&records), without_time(&full));
    assert_eq!(resumed.state().queries, full_state.queries);
    assert_eq!(resumed.state().labels, full_state.labels);
}

#[test]
fn failed_annotation_commits_nothing() {
    let mut cfg = config(Strategy::Badge);
    cfg.oracle = OracleSpec::Human { timeout_secs: None };
    let session = Arc::new(SessionStore::new("t", SessionStore::numbered_classes(K)));
    let (train, test) = splits();
    let mut engine = Engine::new(cfg, 0, train, test, Some(Arc::clone(&session))).unwrap();
    let before = engine.state().clone();
    session.cancel();
    let err = engine.run_round().unwrap_err();
    assert!(matches!(err, EngineError::Oracle(_)), "{err}");
    assert_eq!(engine.state(), &before);
}

#[test]
fn unqueried_labels_never_influence_the_run() {
    let cfg = config(Strategy::AsklearnVwcc);
    let (records, state) = run(&cfg, splits().0, splits().1);
    let hidden: Vec<usize> = (0..160).filter(|id| !state.pool.labeled_ids().contains(id)).collect();
    assert!(!hidden.is_empty());

    // scramble every label the oracle was never asked for
    let (train, test) = splits();
    let mut labels = train.labels.clone();
    for &id in &hidden {
        labels[id] = (labels[id] + 1 + id % (K - 1)) % K;
    }
    let scrambled = Dataset::new(train.images.clone(), labels, K, Split::Train).unwrap();
    let (records2, state2) = run(&cfg, scrambled, test);
    assert_eq!(without_time(&records), without_time(&records2));
    assert_eq!(state.queries, state2.queries);
}

#[test]
fn noisy_labels_stay_in_the_labeled_set() {
    let mut cfg = config(Strategy::Random);
    cfg.oracle = OracleSpec::Noisy { noise_ratio: 0.25 };
    let (train, test) = splits();
    let truth = train.labels.clone();
    let (_, state) = run(&cfg, train, test);
    assert_eq!(state.corrupted_ids.len(), cfg.rounds() * 2);
    let keys: BTreeSet<usize> = state.labels.keys().copied().collect();
    assert_eq!(&keys, state.pool.labeled_ids());
    for (&id, &label) in &state.labels {
        assert_eq!(label != truth[id], state.corrupted_ids.contains(&id), "id {id}");
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ExperimentConfig { budget: 905, batch_size: 100, ..ExperimentConfig::default() };
    assert!(matches!(cfg.validate(), Err(EngineError::ConfigInvalid(_))));
    cfg.budget = 900;
    cfg.validate().unwrap();
    assert!(ExperimentConfig::from_json(r#"{"budgte": 900}"#).is_err());
    let parsed = ExperimentConfig::from_json(r#"{"strategy": "badge", "oracle": {"kind": "noisy", "noise_ratio": 0.1}}"#)
        .unwrap();
    assert_eq!(parsed.strategy, Strategy::Badge);
    assert_eq!(parsed.oracle, OracleSpec::Noisy { noise_ratio: 0.1 });
}

#[test]
fn experiment_writes_trial_and_aggregate_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(Strategy::Entropy);
    cfg.trials = 3;
    cfg.checkpoint = true;
    cfg.output_dir = dir.path().to_path_buf();
    let (train, test) = splits();
    let first = run_experiment_with(&cfg, &train, &test).unwrap();
    assert_eq!(first.len(), 3);
    for t in 0..3 {
        let text = std::fs::read_to_string(dir.path().join(format!("trial_{t}.csv"))).unwrap();
        assert_eq!(text.lines().count(), cfg.rounds() + 2);
        assert!(dir.path().join(format!("trial_{t}.state.json")).exists());
    }
    let agg = std::fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert!(agg.starts_with("round,labeled_count,accuracy_mean,accuracy_std,"));
    assert_eq!(agg.lines().count(), cfg.rounds() + 2);

    // completed state files are picked up again without retraining
    let again = run_experiment_with(&cfg, &train, &test).unwrap();
    assert_eq!(again, first);
}

#[test]
fn shipped_config_spells_out_the_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/mnist.json");
    let shipped = ExperimentConfig::from_file(path).unwrap();
    let expected = ExperimentConfig { output_dir: "out/mnist".into(), ..ExperimentConfig::default() };
    assert_eq!(shipped, expected);
}
