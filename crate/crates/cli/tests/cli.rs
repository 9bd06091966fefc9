use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use storm_core::datagen::Dataset;

fn storm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_storm"))
        .args(args)
        .env_remove("STORM_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = storm(args);
    assert!(
        out.status.success(),
        "storm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn listed(dir: &Path) -> Vec<String> {
    json(&dir.join("outputs.json"))["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["path"].as_str().unwrap().to_string())
        .collect()
}

/// Dataset plus a briefly trained checkpoint shared by the read-only commands.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    train: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d0");
        let train = dir.path().join("t0");
        ok(&["gen-data", "--n", "40", "--seed", "7", "--out-dir", data.to_str().unwrap()]);
        ok(&[
            "train",
            "--stage",
            "both",
            "--steps",
            "30",
            "--data",
            data.to_str().unwrap(),
            "--out-dir",
            train.to_str().unwrap(),
        ]);
        Fixture { _dir: dir, data, train }
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_writes_dataset_and_manifest() {
    let f = fixture();
    let files = listed(&f.data);
    for name in ["manifest.json", "samples.bin", "config.json"] {
        assert!(files.contains(&name.to_string()), "{files:?}");
        assert!(f.data.join(name).exists());
    }
    assert_eq!(Dataset::read(&f.data).unwrap().samples.len(), 40);
}

#[test]
fn train_both_writes_two_checkpoints_and_reports() {
    let f = fixture();
    let files = listed(&f.train);
    for name in ["stage1.ckpt", "stage2.ckpt", "stage1_report.csv", "stage2_report.csv"] {
        assert!(files.contains(&name.to_string()), "{files:?}");
    }
    let csv = fs::read_to_string(f.train.join("stage1_report.csv")).unwrap();
    assert!(csv.starts_with("step,l_ans,l_latent,total,grad_norm"));
    assert_eq!(csv.lines().count(), 31);
}

#[test]
fn eval_accuracy_matches_an_independent_recount() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (e, r) = (dir.path().join("e"), dir.path().join("r"));
    let ckpt = f.train.join("stage2.ckpt");
    ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&f.data), "--split", "heldout", "--out-dir", s(&e)]);
    ok(&["rollout", "--ckpt", s(&ckpt), "--data", s(&f.data), "--split", "heldout", "--out-dir", s(&r)]);
    let reported = json(&e.join("eval.json"))["accuracy"].as_f64().unwrap();

    let ds = Dataset::read(&f.data).unwrap();
    let stored: std::collections::HashMap<u64, u32> =
        ds.heldout().iter().map(|s| (s.sample_id as u64, s.qa.answer)).collect();
    let rollouts = json(&r.join("rollouts.json"));
    let rows = rollouts.as_array().unwrap();
    assert_eq!(rows.len(), stored.len());
    let correct = rows
        .iter()
        .filter(|row| {
            let first = row["answer"].as_array().unwrap().first().and_then(|v| v.as_u64());
            first == Some(stored[&row["sample_id"].as_u64().unwrap()] as u64)
        })
        .count();
    assert_eq!(reported, correct as f64 / rows.len() as f64);
    // Each trace ends with the totals record.
    let trace = fs::read_to_string(r.join("traces").join(format!("sample_{:05}.jsonl", ds.heldout()[0].sample_id))).unwrap();
    assert!(trace.lines().last().unwrap().contains("decode_passes"));
}

#[test]
fn diagnostics_commands_write_their_reports() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = f.train.join("stage2.ckpt");
    let base = ["--ckpt", s(&ckpt), "--data", s(&f.data), "--split", "all"];
    for (cmd, expect) in [
        ("probe", "retrieval_latent.csv"),
        ("ablate", "slot_ablation.csv"),
        ("export-embed", "embeddings.csv"),
        ("bench", "bench.json"),
    ] {
        let out = dir.path().join(cmd);
        let mut args = vec![cmd];
        args.extend(base);
        args.extend(["--out-dir", s(&out)]);
        ok(&args);
        assert!(listed(&out).contains(&expect.to_string()), "{cmd}");
    }
    let bench = json(&dir.path().join("bench").join("bench.json"));
    assert_eq!(bench[1]["mode"], "SIMULATED_TOOL(3)");
    let ablation = fs::read_to_string(dir.path().join("ablate").join("slot_ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 1 + 2 * 8 + 2);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = storm(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_configuration_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"model": {"depth": 3}}"#).unwrap();
    let out = storm(&["gen-data", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("depth"));
    assert_eq!(storm(&["train", "--lambda", "-1", "--out-dir", s(dir.path())]).status.code(), Some(1));
    assert_eq!(storm(&["eval", "--out-dir", s(dir.path())]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let out = storm(&["eval", "--ckpt", s(&missing), "--data", s(&f.data), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_copy_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--n", "12", "--seed", "3", "--density", "3", "--out-dir", s(&a)]);
    let copy = a.join("config.json");
    ok(&["gen-data", "--config", s(&copy), "--out-dir", s(&b)]);
    for f in ["samples.bin", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn training_is_byte_reproducible() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t1");
    ok(&["train", "--stage", "both", "--steps", "30", "--data", s(&f.data), "--out-dir", s(&out)]);
    for name in ["stage1.ckpt", "stage2.ckpt", "stage1_report.csv", "stage2_report.csv"] {
        assert_eq!(fs::read(out.join(name)).unwrap(), fs::read(f.train.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn single_stage_training_continues_from_a_checkpoint() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = f.train.join("stage1.ckpt");
    ok(&["train", "--stage", "2", "--steps", "5", "--ckpt", s(&ckpt), "--data", s(&f.data), "--out-dir", s(dir.path())]);
    assert!(dir.path().join("stage2.ckpt").exists());
    assert!(!dir.path().join("stage1.ckpt").exists());
}

#[test]
fn out_dir_defaults_under_storm_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_storm"))
        .args(["gen-data", "--n", "4"])
        .env("STORM_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("gen-data").join("samples.bin").exists());
}
