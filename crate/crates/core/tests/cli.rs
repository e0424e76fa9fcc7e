use std::path::Path;
use std::process::{Command, Output};

fn promm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promm"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_eval_succeeds_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = promm(&["train", "--set", "train.steps=20", "--seed", "2", "--out", arg(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "summary.json", "pseudo_labels.csv", "checkpoint.bin", "config.toml"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 2);
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);

    let eval_dir = dir.path().join("eval");
    let ckpt = run.join("checkpoint.bin");
    let out = promm(&["eval", "--seed", "2", "--checkpoint", arg(&ckpt), "--out", arg(&eval_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(eval_dir.join("eval.json").exists());
}

#[test]
fn shipped_config_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.toml");
    let out = promm(&["generate", "--config", arg(&config), "--out", arg(dir.path())]);
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("split.csv").exists());
}

#[test]
fn config_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    for set in ["train.no_such_key=1", "thresholds.tau2=0.99", "scenario.shots=20", "train.steps=oops"] {
        let out = promm(&["train", "--set", set, "--out", arg(dir.path())]);
        assert_eq!(code(&out), 1, "--set {set}");
    }
    assert_eq!(code(&promm(&["no-such-command"])), 1);
    assert_eq!(code(&promm(&["sweep-tau2", "--values", "1.5", "--out", arg(dir.path())])), 1);
}

#[test]
fn io_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    assert_eq!(code(&promm(&["eval", "--checkpoint", arg(&missing), "--out", arg(dir.path())])), 3);
    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&promm(&["eval", "--checkpoint", arg(&garbage), "--out", arg(dir.path())])), 3);
    let missing_cfg = dir.path().join("missing.toml");
    assert_eq!(code(&promm(&["train", "--config", arg(&missing_cfg)])), 3);
}

#[test]
fn numerical_abort_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = promm(&["train", "--set", "train.learning_rate=1e308", "--set", "train.steps=30", "--out", arg(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(dir.path().join("last_good.bin").exists());
}

#[test]
fn gradcheck_passes() {
    let out = promm(&["gradcheck", "--seeds", "3"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradient checks passed"));
}
