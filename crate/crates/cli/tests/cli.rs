use std::path::Path;
use std::process::{Command, Output};

use ckge_core::dataset::load_checkpoint;
use ckge_core::telemetry::read_report;

fn ckge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ckge"))
        .args(args)
        .env("CKGE_LOG", "warn")
        .output()
        .expect("spawn ckge")
}

fn ok(args: &[&str]) -> String {
    let out = ckge(args);
    assert!(
        out.status.success(),
        "ckge {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path) {
    ok(&[
        "--seed",
        "3",
        "gen-synthetic",
        "--out",
        p(dir),
        "--base-entities",
        "60",
        "--base-relations",
        "4",
        "--base-facts",
        "400",
        "--snapshots",
        "3",
    ]);
}

const QUICK: [&str; 10] = [
    "--dim",
    "8",
    "--tokens",
    "3",
    "--max-epochs-first",
    "6",
    "--max-epochs",
    "3",
    "--stage1-epochs",
    "2",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "--reproducible",
        "train",
        "--data",
        p(data),
        "--out",
        p(out),
    ];
    args.extend_from_slice(&QUICK);
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn usage_errors_exit_with_two() {
    let out = ckge(&["train", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ckge(&["train", "--data", "x", "--out", "y", "--tokens", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = ckge(&[
        "train",
        "--data",
        p(&missing),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_then_eval_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    gen(&data);
    train(&data, &run, &[]);
    let report = read_report(&run).unwrap();
    assert_eq!(report.snapshots.len(), 3);
    for f in [
        "report.json",
        "metrics.csv",
        "forgetting.csv",
        "config.json",
    ] {
        assert!(run.join(f).is_file(), "{f} missing");
    }

    let ckpt = run.join("checkpoints").join("snapshot-2.ckpt");
    for j in 0..3 {
        let s = j.to_string();
        let filtered: serde_json::Value = serde_json::from_str(&ok(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&data),
            "--snapshot",
            &s,
        ]))
        .unwrap();
        assert_eq!(filtered["mrr"].as_f64(), report.forgetting.mrr(2, j));
        let raw: serde_json::Value = serde_json::from_str(&ok(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&data),
            "--snapshot",
            &s,
            "--raw",
        ]))
        .unwrap();
        assert!(raw["mrr"].as_f64().unwrap() <= filtered["mrr"].as_f64().unwrap());
    }

    let out = ckge(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--snapshot",
        "7",
    ]);
    assert!(!out.status.success());

    let summary = ok(&["report", "--run", p(&run)]);
    assert!(summary.contains("average mrr") && summary.contains("forgetting matrix"));
}

#[test]
fn ablated_ett_matches_fine_tune() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train(&data, &a, &["--no-distill", "--no-stage1", "--no-div"]);
    train(&data, &b, &["--mode", "fine-tune"]);
    let ra = read_report(&a).unwrap();
    let rb = read_report(&b).unwrap();
    assert_eq!(ra.forgetting, rb.forgetting);
    let (sa, _) = load_checkpoint::<f32>(&a.join("checkpoints").join("snapshot-2.ckpt")).unwrap();
    let (sb, _) = load_checkpoint::<f32>(&b.join("checkpoints").join("snapshot-2.ckpt")).unwrap();
    assert_eq!(sa.entities, sb.entities);
    assert_eq!(sa.relations, sb.relations);
}

#[test]
fn grad_check_passes() {
    let out = ok(&["grad-check", "--trials", "10"]);
    for name in ["margin", "diversity", "distill", "token-objective", "total"] {
        assert!(out.contains(name), "{out}");
    }
}
