use std::path::Path;
use std::process::{Command, Output};

use mirrn::bench::BenchReport;
use mirrn::harness::AblationRow;

const SMALL: &str = r#"
seed = 3
[synth]
vocab = 300
topics = 6
users = 1500
L = 60
[model]
L_max = 60
[retrieval]
K = 8
[clustering]
C = 6
[train]
batch = 8
null_shuffles = 20
"#;

fn mirrn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mirrn")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = mirrn(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn error_record(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    serde_json::from_str(err.trim_end()).unwrap()
}

#[test]
fn synth_is_deterministic() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["synth", "--config", "small.toml", "--seed", "1", "--out", "a.jsonl"]);
    ok(p, &["synth", "--config", "small.toml", "--seed", "1", "--out", "b.jsonl"]);
    ok(p, &["synth", "--config", "small.toml", "--seed", "2", "--out", "c.jsonl"]);
    let a = std::fs::read(p.join("a.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, std::fs::read(p.join("b.jsonl")).unwrap());
    assert_ne!(a, std::fs::read(p.join("c.jsonl")).unwrap());
}

#[test]
fn train_without_cluster_file_names_the_artifact() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["synth", "--config", "small.toml"]);
    let rec = error_record(&mirrn(p, &["train", "--config", "small.toml"]));
    assert_eq!(rec["error"], "missing_artifact");
    assert_eq!(rec["artifact"], "cluster model");
    assert!(rec["path"].as_str().unwrap().ends_with("clusters.bin"));
    assert!(!p.join("runs/model.ckpt").exists());
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["synth", "--config", "small.toml"]);
    ok(p, &["cluster", "--config", "small.toml"]);
    ok(p, &["ablate", "--config", "small.toml", "--variants", "tasu,tasu+lasu,full", "--out", "abl.jsonl"]);
    let text = std::fs::read_to_string(p.join("abl.jsonl")).unwrap();
    let rows: Vec<AblationRow> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["tasu", "tasu+lasu", "full"]);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.auc)));
}

#[test]
fn train_eval_round_trip_is_reproducible() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["synth", "--config", "small.toml"]);
    ok(p, &["cluster", "--config", "small.toml"]);
    ok(p, &["train", "--config", "small.toml", "--out", "one.ckpt"]);
    let log1 = std::fs::read(p.join("runs/metrics.jsonl")).unwrap();
    ok(p, &["train", "--config", "small.toml", "--out", "two.ckpt"]);
    assert_eq!(log1, std::fs::read(p.join("runs/metrics.jsonl")).unwrap());
    assert_eq!(std::fs::read(p.join("one.ckpt")).unwrap(), std::fs::read(p.join("two.ckpt")).unwrap());
    let e1 = ok(p, &["eval", "--config", "small.toml", "--checkpoint", "one.ckpt"]);
    let e2 = ok(p, &["eval", "--config", "small.toml", "--checkpoint", "two.ckpt"]);
    assert_eq!(e1, e2);
    let rec: serde_json::Value = serde_json::from_str(e1.trim()).unwrap();
    assert_eq!(rec["split"], "test");
}

#[test]
fn malformed_config_reports_line() {
    let dir = workspace();
    let p = dir.path();
    std::fs::write(p.join("bad.toml"), "seed = 1\n[train]\nbatch = \"many\"\n").unwrap();
    let rec = error_record(&mirrn(p, &["synth", "--config", "bad.toml"]));
    assert_eq!(rec["error"], "parse");
    assert!(rec["message"].as_str().unwrap().contains("line 3"), "{rec}");
    let rec = error_record(&mirrn(p, &["synth", "--config", "missing.toml"]));
    assert_eq!(rec["error"], "missing_artifact");
}

#[test]
fn unknown_flag_is_a_one_line_usage_error() {
    let dir = workspace();
    let out = mirrn(dir.path(), &["synth", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "usage");
}

#[test]
fn bench_reports_round_trip_and_record_threads() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["bench-retrieval", "--L", "500", "--d", "16", "--m", "32", "--K", "10", "--reps", "30", "--out", "r.json"]);
    let r = BenchReport::from_json(&std::fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    assert_eq!((r.config["L"], r.config["K"], r.threads), (500, 10, 1));
    assert!(r.case("hamming").is_some() && r.case("inner_product").is_some());
    let text = ok(p, &["bench-mixer", "--K", "8", "--d", "8", "--n", "2", "--reps", "30", "--threads", "2"]);
    let m = BenchReport::from_json(&text).unwrap();
    assert_eq!(m.threads, 2);
    assert_eq!(m.case("mhsa").unwrap().params, Some(4 * 64));
    let bad = mirrn(p, &["bench-mixer", "--reps", "5"]);
    assert_eq!(error_record(&bad)["error"], "config");
}
