use std::fs;
use std::process::Command;

use cppo_core::config::RunManifest;

fn cppo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cppo"))
}

#[test]
fn usage_errors_exit_one() {
    let out = cppo().args(["train", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = cppo().args(["train", "--set", "cpl.tau=-1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cpl.tau"));
    let out = cppo().args(["analyze", "--trace", "/nonexistent.jsonl"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_manifest_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small run\ntrain.dataset_size = 96\ntrain.epochs = 1\ntrain.checkpoint_every = 1\neval.episodes = 20\n").unwrap();
    let out_dir = dir.path().join("run");
    let out = cppo()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--grpo-only", "--seed", "4", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let manifest = RunManifest::load(&out_dir.join("manifest.txt")).unwrap();
    assert_eq!(manifest.config.train.cpl.lambda, 0.0);
    assert_eq!(manifest.config.train.seed, 4);
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3);
    for step in 0..=3 {
        assert!(out_dir.join("checkpoints").join(format!("step_{step:07}.bin")).exists());
    }
    assert!(out_dir.join("report").join("summary.csv").exists());

    // Re-running from the manifest reproduces the metrics exactly.
    let rerun = dir.path().join("rerun");
    let out = cppo()
        .args(["train", "--config"])
        .arg(out_dir.join("manifest.txt"))
        .arg("--out")
        .arg(&rerun)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(rerun.join("metrics.csv")).unwrap(), metrics.as_bytes());
    assert_eq!(fs::read(rerun.join("final.bin")).unwrap(), fs::read(out_dir.join("final.bin")).unwrap());
}

#[test]
fn export_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = cppo()
        .args(["train", "--set", "train.dataset_size=64", "--set", "train.epochs=1", "--set", "eval.episodes=10", "--out"])
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success());
    let trace = dir.path().join("t.jsonl");
    let out = cppo()
        .args(["export-trace", "--episodes", "20", "--checkpoint"])
        .arg(run.join("final.bin"))
        .arg("--out")
        .arg(&trace)
        .output()
        .unwrap();
    assert!(out.status.success());
    let report = dir.path().join("report.json");
    let out = cppo().args(["analyze", "--k", "0.5", "--trace"]).arg(&trace).arg("--report").arg(&report).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("detection precision="));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(json["baseline"]["resamples"], 1000);
}

#[test]
fn oracle_check_passes() {
    let out = cppo().args(["oracle-check", "--suite", "mi"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}
