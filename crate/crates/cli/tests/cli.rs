use std::fs;
use std::path::Path;
use std::process::Command;

use asklearn_core::data::{encode_idx_images, encode_idx_labels};

fn write_split(dir: &Path, prefix: &str, n: usize, offset: usize) {
    let labels: Vec<u8> = (0..n).map(|i| ((i * 7 + offset) % 3) as u8).collect();
    let mut pixels = Vec::with_capacity(n * 36);
    for (i, &y) in labels.iter().enumerate() {
        for r in 0..6 {
            for c in 0..6 {
                let band = if c / 2 == y as usize { 200 } else { 0 };
                pixels.push((band + (i * 31 + r * 7 + c * 13) % 40) as u8);
            }
        }
    }
    fs::write(dir.join(format!("{prefix}-images")), encode_idx_images(&pixels, n, 6, 6)).unwrap();
    fs::write(dir.join(format!("{prefix}-labels")), encode_idx_labels(&labels)).unwrap();
}

fn config(dir: &Path, extra: &str) -> std::path::PathBuf {
    write_split(dir, "train", 150, 0);
    write_split(dir, "test", 60, 1);
    let d = dir.display();
    let text = format!(
        r#"{{
  "dataset": {{"train_images": "{d}/train-images", "train_labels": "{d}/train-labels",
               "test_images": "{d}/test-images", "test_labels": "{d}/test-labels"}},
  "strategy": "badge", "seed_size": 10, "batch_size": 10, "budget": 20, "trials": 2,
  "model": {{"hidden": [16], "dropout": 0.2}},
  "training": {{"max_epochs": 4, "batch_size": 16}},
  "checkpoint": false{extra}
}}"#
    );
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn asklearn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_asklearn")).args(args).output().unwrap()
}

fn strip_wall(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn run_writes_trial_and_aggregate_csvs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let o = asklearn(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["trial_0.csv", "trial_1.csv"] {
        let a = fs::read_to_string(out_a.join(name)).unwrap();
        let b = fs::read_to_string(out_b.join(name)).unwrap();
        assert_eq!(a.lines().next().unwrap(), "round,labeled_count,accuracy,ece,nll,brier,wall_ms");
        assert_eq!(a.lines().count(), 4);
        assert_eq!(strip_wall(&a), strip_wall(&b));
    }
    let agg = fs::read_to_string(out_a.join("aggregate.csv")).unwrap();
    assert_eq!(
        agg.lines().next().unwrap(),
        "round,labeled_count,accuracy_mean,accuracy_std,ece_mean,ece_std,nll_mean,nll_std,\
         brier_mean,brier_std,wall_ms_mean,wall_ms_std"
    );
    let counts: Vec<&str> = agg.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(counts, ["10", "20", "30"]);
}

#[test]
fn overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let base = dir.path().join("base");
    let other = dir.path().join("other");
    assert!(asklearn(&["run", "--config", cfg, "--out", base.to_str().unwrap()]).status.success());
    let o = asklearn(&["run", "--config", cfg, "--out", other.to_str().unwrap(), "--seed", "9", "--strategy", "random"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = fs::read_to_string(base.join("trial_0.csv")).unwrap();
    let b = fs::read_to_string(other.join("trial_0.csv")).unwrap();
    assert_ne!(strip_wall(&a), strip_wall(&b));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace(r#""budget": 20"#, r#""budget": 25"#)).unwrap();
    let o = asklearn(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("not a multiple"));

    let cfg = config(dir.path(), "");
    let o = asklearn(&["run", "--config", cfg.to_str().unwrap(), "--strategy", "coreset"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown strategy"));
}
