use std::path::Path;
use std::process::{Command, Output};

use tumorseg::harness::RunConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tumorseg")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().expect("summary line")).unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().expect("error line")).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_ten_subjects() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cohort");
    let spec = dir.path().join("spec.json");
    let tiny = RunConfig::tiny().data.phantom.unwrap();
    std::fs::write(&spec, serde_json::to_string(&tiny).unwrap()).unwrap();
    let summary = stdout_json(&run(&["synth", "--config", p(&spec), "--out", p(&out), "--count", "10"]));
    assert_eq!(summary["subjects"], 10);
    assert_eq!((summary["train"].as_u64(), summary["val"].as_u64(), summary["test"].as_u64()), (Some(8), Some(1), Some(1)));
    assert!(out.join("manifest.json").exists());
    assert!(out.join("subject_000").join("meta.json").exists());
}

#[test]
fn synth_zero_subjects_warns() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&["synth", "--out", p(dir.path()), "--count", "0"]);
    let summary = stdout_json(&output);
    assert_eq!(summary["subjects"], 0);
    assert!(String::from_utf8_lossy(&output.stderr).to_lowercase().contains("warn"));
}

#[test]
fn missing_checkpoint_reports_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let err = stderr_json(&run(&["eval", "--checkpoint", p(&missing), "--out", p(dir.path())]));
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("nope.json"));
}

#[test]
fn invalid_config_reports_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.json");
    let mut cfg = RunConfig::tiny();
    cfg.optim.batch_size = 0;
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let err = stderr_json(&run(&["train", "--config", p(&cfg_path), "--out", p(dir.path())]));
    assert_eq!(err["error"], "config");
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.json");
    let mut cfg = RunConfig::tiny();
    cfg.optim.max_steps = Some(2);
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let run_dir = dir.path().join("run");
    let summary = stdout_json(&run(&["train", "--config", p(&cfg_path), "--out", p(&run_dir)]));
    assert_eq!(summary["steps"], 2);
    for f in ["config.json", "history.csv", "checkpoint_best.json", "checkpoint_last.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let eval_dir = dir.path().join("eval");
    let ck = run_dir.join("checkpoint_best.json");
    let summary = stdout_json(&run(&["eval", "--checkpoint", p(&ck), "--split", "test", "--out", p(&eval_dir)]));
    assert!(summary["items"].as_u64().unwrap() > 0);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(eval_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["fingerprint"], cfg.fingerprint());
    assert!(std::fs::read_to_string(eval_dir.join("report.csv")).unwrap().contains("dice_wt"));

    let err = stderr_json(&run(&["eval", "--checkpoint", p(&ck), "--split", "dev", "--out", p(&eval_dir)]));
    assert_eq!(err["error"], "config");
}

#[test]
fn gradcheck_on_the_tiny_profile() {
    let output = run(&["gradcheck", "--params", "100"]);
    let summary = stdout_json(&output);
    assert_eq!(summary["passed"], true);
    assert!(summary["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert!(summary["checks"].as_u64().unwrap() >= 100);
}
