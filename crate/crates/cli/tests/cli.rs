use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "encoder": {"num_layers": 1, "model_dim": 16, "num_heads": 2, "ffn_dim": 32, "embed_dim": 16, "pool_hidden": 8},
  "fclora": {"rank": 2, "branches": 2},
  "adapter": {"groups": 4},
  "losses": {"bank_size": 64},
  "metrics": {"mode": "mean"},
  "training": {"steps": 4, "warmup_steps": 1, "lr": 1e-3, "batch_size": 8, "log_every": 2, "checkpoint_every": 2},
  "data": {"corpus": {"train_per_machine": 4, "test_per_machine": 24, "clip_seconds": 2.0}}
}"#;

fn asdkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asdkit"))
        .arg("--workdir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn asdkit")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = asdkit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workdir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn score_map(path: &Path) -> Vec<(String, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn gen_data_refuses_to_overwrite() {
    let dir = workdir();
    let p = dir.path();
    let first = ok(p, &["--config", "tiny.json", "gen-data"]);
    assert!(first.contains("fan"));
    let again = asdkit(p, &["--config", "tiny.json", "gen-data"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(p, &["--config", "tiny.json", "gen-data", "--force"]);
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = workdir();
    let p = dir.path();
    assert_eq!(asdkit(p, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(asdkit(p, &["--help"]).status.code(), Some(0));
    fs::write(p.join("bad.json"), r#"{"training": {"stepz": 3}}"#).unwrap();
    assert_eq!(asdkit(p, &["--config", "bad.json", "config"]).status.code(), Some(1));
    fs::write(p.join("zero.json"), r#"{"training": {"batch_size": 0}}"#).unwrap();
    assert_eq!(asdkit(p, &["--config", "zero.json", "config"]).status.code(), Some(1));
}

#[test]
fn missing_stage_artifact_is_named() {
    let dir = workdir();
    let p = dir.path();
    let expect = |args: &[&str], file: &str| {
        let out = asdkit(p, &[&["--config", "tiny.json"][..], args].concat());
        assert_eq!(out.status.code(), Some(2));
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(file), "{args:?}: {err}");
    };
    expect(&["train"], "manifest.jsonl");
    ok(p, &["--config", "tiny.json", "gen-data"]);
    expect(&["embed"], "model.ckpt");
    expect(&["score"], "index.json");
    expect(&["eval"], "scores.csv");
}

#[test]
fn overrides_reach_the_config() {
    let dir = workdir();
    let cfg = ok(dir.path(), &["--config", "tiny.json", "--seed", "7", "--mode", "lora", "--nq", "3", "config"]);
    let v: serde_json::Value = serde_json::from_str(&cfg).unwrap();
    assert_eq!(v["data"]["seed"], 7);
    assert_eq!(v["training"]["seed"], 7);
    assert_eq!(v["fclora"]["frozen"], true);
    assert_eq!(v["losses"]["n_q"], 3);
}

#[test]
fn staged_pipeline_and_merge() {
    let dir = workdir();
    let p = dir.path();
    let c = ["--config", "tiny.json"];
    let run = |args: &[&str]| ok(p, &[&c[..], args].concat());
    run(&["gen-data"]);
    run(&["train"]);
    assert!(p.join("checkpoints/step_000002.ckpt").exists());
    assert_eq!(fs::read_to_string(p.join("train_log.csv")).unwrap().lines().count(), 5);
    run(&["embed"]);
    run(&["fit-backend"]);
    run(&["score"]);

    let manifest = fs::read_to_string(p.join("data/manifest.jsonl")).unwrap();
    let tests = manifest.lines().filter(|l| l.contains("\"split\":\"test\"")).count();
    let scores = score_map(&p.join("scores.csv"));
    assert_eq!(scores.len(), tests);

    let table = run(&["eval"]);
    assert!(table.contains("fan"));
    for f in ["report.txt", "report.csv", "report.json", "plots/bars.svg"] {
        assert!(p.join(f).exists(), "{f}");
    }

    let merged = run(&["merge-lora"]);
    assert!(merged.starts_with("merged"));
    run(&["embed", "--model", "merged.ckpt", "--out", "m_emb.ckpt"]);
    run(&["fit-backend", "--embeddings", "m_emb.ckpt", "--out", "m_index.json"]);
    run(&["score", "--index", "m_index.json", "--embeddings", "m_emb.ckpt", "--out", "m_scores.csv"]);
    let after = score_map(&p.join("m_scores.csv"));
    for ((a, x), (b, y)) in scores.iter().zip(&after) {
        assert_eq!(a, b);
        assert!((x - y).abs() <= 1e-5, "{a}: {x} vs {y}");
    }

    let twice = run(&["merge-lora", "--model", "merged.ckpt", "--out", "merged2.ckpt"]);
    assert!(twice.contains("nothing merged"));

    let groups = run(&["inspect-groups"]);
    assert!(groups.contains("clips"));
    let header = fs::read_to_string(p.join("groups.csv")).unwrap();
    assert!(header.starts_with("clip_id,machine_type,p_1,p_2,p_3,p_4"));
}
