use std::path::Path;
use std::process::{Command, Output};

fn gacl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gacl"))
        .args(args)
        .current_dir(dir)
        .env_remove("GACL_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gacl(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(gacl(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(gacl(dir.path(), &["gen-data", "--kind", "pictures"]).status.code(), Some(2));
    assert_eq!(gacl(dir.path(), &["verify", "--preset", "huge"]).status.code(), Some(2));
    assert_eq!(gacl(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn verify_reports_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&gacl(dir.path(), &["verify", "--preset", "cos", "--fd-trials", "20"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1);
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["passed"], true);
    let bad = gacl(dir.path(), &["verify", "--preset", "cos", "--lambda-g", "0.01"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn train_then_score_rank_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    stdout(&gacl(p, &["gen-data", "--samples", "20", "--noise", "0.2", "--seed", "4"]));
    let summary = stdout(&gacl(p, &["train", "--data", "data.jsonl", "--epochs", "6", "--seed", "4"]));
    assert!(serde_json::from_str::<serde_json::Value>(summary.trim()).is_ok());
    assert!(p.join("model.json").exists());
    assert!(p.join("train_log.csv").exists());

    let score = stdout(&gacl(p, &["score", "--model", "model.json", "--data", "data.jsonl"]));
    assert_eq!(score.lines().next(), Some("id,q,theta,verdict"));
    assert_eq!(score.lines().count(), 181);
    let rank = stdout(&gacl(p, &["rank", "--model", "model.json", "--data", "data.jsonl"]));
    let qs: Vec<f64> = rank.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(qs.windows(2).all(|w| w[0] >= w[1]));
    let export = stdout(&gacl(p, &["export", "--model", "model.json"]));
    let v: serde_json::Value = serde_json::from_str(export.trim()).unwrap();
    assert!(v.get("calibration").is_some());
    let cleanse = stdout(&gacl(p, &["cleanse", "--model", "model.json", "--data", "data.jsonl"]));
    assert_eq!(cleanse.lines().count(), 181);
}

#[test]
fn toy_is_deterministic_and_honours_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["toy", "--arrangement", "grid", "--samples", "15", "--epochs", "4", "--seed", "1", "--out-dir", "runs"];
    let a = stdout(&gacl(dir.path(), &args));
    let csv_a = std::fs::read(dir.path().join("runs/toy_grid.csv")).unwrap();
    let b = stdout(&gacl(dir.path(), &args));
    let csv_b = std::fs::read(dir.path().join("runs/toy_grid.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(csv_a, csv_b);
    assert!(String::from_utf8(csv_a).unwrap().starts_with("x,y,component,cluster,"));
}

#[test]
fn bin_ratings_csv() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("r.csv"), "id,score\na,1\nb,2\nc,3\nd,4\n").unwrap();
    let out = stdout(&gacl(dir.path(), &["bin-ratings", "--ratings", "r.csv", "--bins", "2"]));
    let bins: Vec<&str> = out.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(bins, ["0", "0", "1", "1"]);
}
