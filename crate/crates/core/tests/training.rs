use std::fs;
use std::path::Path;

use promm::runner::{self, AblationMask, RunConfig};
use promm::Error;

fn small(dir: &Path, steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(5);
    cfg.train.steps = steps;
    cfg.train.metrics_every = 10;
    cfg.train.audit_every_epochs = 2;
    cfg.out = dir.to_path_buf();
    cfg
}

fn loss_columns(records: &[runner::MetricsRecord]) -> Vec<[f64; 5]> {
    records
        .iter()
        .map(|r| [r.loss_base, r.loss_intra, r.loss_inter, r.loss_batch, r.loss_total])
        .collect()
}

#[test]
fn identical_config_and_seed_give_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    runner::train(&small(a.path(), 60)).unwrap();
    runner::train(&small(b.path(), 60)).unwrap();
    for file in ["metrics.csv", "checkpoint.bin", "pseudo_labels.csv"] {
        let x = fs::read(a.path().join(file)).unwrap();
        let y = fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs");
    }
}

#[test]
fn different_seeds_give_different_checkpoints() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    runner::train(&small(a.path(), 20)).unwrap();
    runner::train(&small(b.path(), 20).with_seed(6)).unwrap();
    assert_ne!(
        fs::read(a.path().join("checkpoint.bin")).unwrap(),
        fs::read(b.path().join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn evaluation_labels_never_reach_training() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg_a = small(a.path(), 60);
    let split = runner::load_split(&cfg_a).unwrap();
    let mut poisoned = split.clone();
    let flipped: Vec<usize> = split
        .target_unlabeled
        .labels_for_evaluation()
        .iter()
        .map(|&y| (y + 1) % split.classes)
        .collect();
    poisoned.target_unlabeled = poisoned.target_unlabeled.with_eval_labels(flipped);

    let clean = runner::train_on_split(&cfg_a, &split).unwrap();
    let dirty = runner::train_on_split(&small(b.path(), 60), &poisoned).unwrap();
    assert_eq!(loss_columns(&clean.records), loss_columns(&dirty.records));
    assert_eq!(
        fs::read(a.path().join("checkpoint.bin")).unwrap(),
        fs::read(b.path().join("checkpoint.bin")).unwrap()
    );
    assert_ne!(clean.final_record().mca, dirty.final_record().mca);
}

#[test]
fn disabled_terms_report_zero_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 30);
    cfg.ablation = AblationMask {
        intra: false,
        inter: false,
        batch: false,
        ..AblationMask::FULL
    };
    let out = runner::train(&cfg).unwrap();
    for r in &out.records {
        assert_eq!((r.loss_intra, r.loss_inter, r.loss_batch), (0.0, 0.0, 0.0));
        assert_eq!(r.loss_total, r.loss_base);
        assert_eq!(r.pl_ot_cov, 0.0);
    }
}

#[test]
fn zero_steps_records_initial_state_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = runner::train(&small(dir.path(), 0)).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].step, 0);
    assert!(dir.path().join("checkpoint.bin").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 0);
    assert_eq!(summary["config_hash"], out.config_hash.as_str());
}

#[test]
fn audit_accounts_for_every_sample_once_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 40);
    runner::train(&cfg).unwrap();
    let n = cfg.scenario.target_unlabeled;
    let mut reader = csv::Reader::from_path(dir.path().join("pseudo_labels.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["epoch", "sample_id", "branch", "assigned", "true", "confidence"]
    );
    let mut per_epoch: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for row in reader.records() {
        let row = row.unwrap();
        let epoch: usize = row[0].parse().unwrap();
        let confidence: f64 = row[5].parse().unwrap();
        match &row[2] {
            "confident" => assert!(confidence >= cfg.thresholds.tau1 && !row[3].is_empty()),
            "ot" => {
                assert!(confidence >= cfg.thresholds.tau2 && confidence < cfg.thresholds.tau1);
                assert!(!row[3].is_empty());
            }
            "abstain" => assert!(row[3].is_empty() && confidence < cfg.thresholds.tau1),
            other => panic!("unknown branch {other}"),
        }
        per_epoch.entry(epoch).or_default().push(row[1].parse().unwrap());
    }
    assert!(per_epoch.len() >= 2);
    for ids in per_epoch.values() {
        assert_eq!(ids, &(0..n).collect::<Vec<_>>());
    }
}

#[test]
fn training_reduces_the_supervised_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = runner::train(&small(dir.path(), 200)).unwrap();
    let first = out.records.first().unwrap().loss_base;
    let tail: Vec<f64> = out.records.iter().rev().take(5).map(|r| r.loss_base).collect();
    let late = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(late < 0.7 * first, "base loss {first} -> {late}");
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 50);
    cfg.train.learning_rate = 1e308;
    match runner::train(&cfg) {
        Err(e @ Error::NumericalAbort { .. }) => {
            assert_eq!(e.exit_code(), 2);
            assert!(dir.path().join("last_good.bin").exists());
        }
        other => panic!("expected a numerical abort, got {other:?}"),
    }
}

#[test]
fn checkpoint_evaluates_to_the_final_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 50);
    let out = runner::train(&cfg).unwrap();
    let split = runner::load_split(&cfg).unwrap();
    let report = runner::evaluate(&dir.path().join("checkpoint.bin"), &split).unwrap();
    assert_eq!(report.mca, out.final_record().mca);
    assert_eq!(report.overall_acc, out.final_record().overall_acc);
}

#[test]
fn non_finite_inputs_are_rejected_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 20);
    let mut split = runner::load_split(&cfg).unwrap();
    split.source.features.data_mut()[0] = f64::NAN;
    let err = runner::train_on_split(&cfg, &split).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
    assert!(!dir.path().join("checkpoint.bin").exists());
}
