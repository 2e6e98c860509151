use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rgtn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rgtn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rgtn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn generate(dir: &Path, noise: &str) {
    ok(&["generate", "--out", dir.to_str().unwrap(), "--seed", "3", "--noise", noise, "--scale", "50"]);
}

const SMALL: [&str; 6] = ["--set", "hidden=4", "--set", "heads=2", "--set", "head_dim=2"];

#[test]
fn generate_records_the_noise_level() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "0.05");
    let manifest = fs::read_to_string(data.join("manifest.cfg")).unwrap();
    assert!(manifest.lines().any(|l| l == "noise = 0.05"), "{manifest}");
    assert!(data.join("train.bin").exists() && data.join("test.bin").exists());
}

#[test]
fn train_evaluate_export_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    generate(&data, "0");
    let (d, r) = (data.to_str().unwrap(), run.to_str().unwrap());

    let mut args = vec!["train", "--data", d, "--out", r, "--model", "rgtn", "--set", "epochs=1"];
    args.extend(SMALL);
    ok(&args);
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert_eq!(log.lines().next().unwrap(), "epoch,loss,train_acc,test_acc");

    let mut resume = vec!["train", "--data", d, "--out", r, "--resume", "--set", "epochs=2"];
    resume.extend(SMALL);
    ok(&resume);
    assert_eq!(fs::read_to_string(run.join("log.csv")).unwrap().lines().count(), 3);

    let ckpt = run.join("checkpoint.json");
    let eval = tmp.path().join("eval");
    ok(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--data", d, "--out", eval.to_str().unwrap()]);
    for f in ["metrics.csv", "confusion_counts.csv", "confusion_normalized.csv", "confusion.svg"] {
        assert!(eval.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(eval.join("confusion_counts.csv")).unwrap().lines().count(), 11);

    let export = tmp.path().join("export");
    ok(&["export", "--checkpoint", ckpt.to_str().unwrap(), "--out", export.to_str().unwrap()]);
    assert_eq!(
        fs::read_to_string(export.join("log.csv")).unwrap(),
        fs::read_to_string(run.join("log.csv")).unwrap()
    );
}

#[test]
fn config_file_sets_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "0");
    let cfg = tmp.path().join("train.toml");
    fs::write(&cfg, "epochs = 1\nmodel = \"gcn\"\nseed = \"9\"\n").unwrap();
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(fs::read_to_string(run.join("log.csv")).unwrap().lines().count(), 2);
    assert!(fs::read_to_string(run.join("config.toml")).unwrap().contains("model = \"gcn\""));
}

#[test]
fn sweep_writes_a_model_by_level_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let mut args = vec![
        "sweep", "--models", "rgtn,gcn", "--levels", "0,0.1", "--out", out.to_str().unwrap(), "--scale", "50", "--set",
        "epochs=1",
    ];
    args.extend(SMALL);
    ok(&args);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,noise_0pct,noise_10pct");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("rgtn,") && lines[2].starts_with("gcn,"));
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 3));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(rgtn(&[]).status.code(), Some(1));
    assert_eq!(rgtn(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rgtn(&["generate", "--out"]).status.code(), Some(1));
    assert_eq!(rgtn(&["train", "--data", "x", "--out", "y", "--model", "lstm"]).status.code(), Some(1));
    assert_eq!(
        rgtn(&["train", "--data", "x", "--out", "y", "--set", "momentum=0.9"]).status.code(),
        Some(1)
    );
    assert_eq!(rgtn(&["generate", "--out", "x", "--noise", "0.5"]).status.code(), Some(1));
    assert_eq!(rgtn(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let out = rgtn(&["train", "--data", missing.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let ckpt = tmp.path().join("bad.json");
    fs::write(&ckpt, "{}").unwrap();
    let out = rgtn(&["export", "--checkpoint", ckpt.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}
