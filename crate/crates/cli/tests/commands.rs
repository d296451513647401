use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bonnet_core::io_ct::{export_mask, read_labels};
use bonnet_core::network::{init_network, load_checkpoint};
use bonnet_core::Volume;
use tempfile::TempDir;

fn bonnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bonnet"))
        .args(args)
        .env_remove("BONNET_NUM_WORKERS")
        .output()
        .expect("spawn bonnet")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small phantoms keep every command fast.
fn write_spec(dir: &Path) -> PathBuf {
    let path = dir.join("spec.json");
    fs::write(&path, r#"{"shape": [32, 32, 32]}"#).unwrap();
    path
}

fn make_dataset(dir: &Path, count: &str, seed: &str) -> PathBuf {
    let spec = write_spec(dir);
    let out = dir.join(format!("data_{seed}"));
    ok(bonnet(&["phantom", "--spec", s(&spec), "--count", count, "--seed", seed, "--out", s(&out)]));
    out
}

fn train_config(dir: &Path) -> PathBuf {
    let path = dir.join("train.json");
    fs::write(&path, r#"{"sampling": {"window": 16}}"#).unwrap();
    path
}

fn trained(dir: &Path, steps: &str) -> (PathBuf, PathBuf) {
    let data = make_dataset(dir, "2", "7");
    let cfg = train_config(dir);
    let ckpt = dir.join(format!("model_{steps}.bnt"));
    ok(bonnet(&[
        "train", "--data", s(&data), "--config", s(&cfg), "--steps", steps, "--seed", "5", "--out", s(&ckpt),
    ]));
    (data, ckpt)
}

#[test]
fn phantom_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(bonnet(&["phantom", "--spec", s(&spec), "--count", "3", "--seed", "7", "--out", s(out)]));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3 * 4 + 2);
    for name in names.iter().filter(|n| *n != "run.json") {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name:?}");
    }
    let (labels, _) = read_labels(a.join("case_002_labels.rawz")).unwrap();
    assert!(labels.data.iter().all(|&l| l < 4));
    assert!(labels.data.iter().any(|&l| l > 0));
}

#[test]
fn phantom_errors_use_stable_exit_codes() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("no_such_spec.json");
    let out = bonnet(&["phantom", "--spec", s(&missing), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_spec.json"));

    let target = dir.path().join("y");
    let out = bonnet(&["phantom", "--count", "0", "--out", s(&target)]);
    assert_eq!(code(&out), 1);
    assert!(!target.join("run.json").exists());

    assert_eq!(code(&bonnet(&["phantom"])), 1);
    assert_eq!(code(&bonnet(&["frobnicate"])), 1);
    assert_eq!(code(&bonnet(&["--help"])), 0);
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let dir = TempDir::new().unwrap();
    let (_, ckpt) = trained(dir.path(), "0");
    let loaded = load_checkpoint(&ckpt).unwrap();
    assert_eq!(loaded.seed, 5);
    let net = loaded.network::<f32>().unwrap();
    let init = init_network::<f32>(&loaded.config, 5).unwrap();
    assert_eq!(net.slots(), init.slots());
    assert_eq!(fs::read_to_string(dir.path().join("model_0.bnt.loss.csv")).unwrap(), "");
}

#[test]
fn training_writes_one_loss_row_per_step_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = trained(dir.path(), "3");
    let csv = fs::read_to_string(dir.path().join("model_3.bnt.loss.csv")).unwrap();
    let rows: Vec<_> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    for (i, row) in rows.iter().enumerate() {
        let (step, loss) = row.split_once(',').unwrap();
        assert_eq!(step.parse::<usize>().unwrap(), i + 1);
        assert!(loss.parse::<f64>().unwrap().is_finite());
    }
    let again = dir.path().join("again.bnt");
    let cfg = train_config(dir.path());
    ok(bonnet(&[
        "train", "--data", s(&data), "--config", s(&cfg), "--steps", "3", "--seed", "5", "--out", s(&again),
    ]));
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("model_3.bnt.run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["exit_status"], 0);
}

#[test]
fn train_without_dataset_fails_with_data_error() {
    let dir = TempDir::new().unwrap();
    let out = bonnet(&["train", "--data", s(dir.path()), "--steps", "1", "--out", s(&dir.path().join("m.bnt"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.json"));
}

#[test]
fn infer_masks_are_worker_count_independent() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = trained(dir.path(), "2");
    let volume = data.join("case_001.rawz");
    let mut masks = Vec::new();
    for workers in ["1", "8"] {
        let mask = dir.path().join(format!("mask_{workers}.rawz"));
        ok(bonnet(&["infer", "--ckpt", s(&ckpt), "--in", s(&volume), "--out", s(&mask), "--workers", workers]));
        masks.push(fs::read(&mask).unwrap());
    }
    assert_eq!(masks[0], masks[1]);

    let via_env = dir.path().join("mask_env.rawz");
    let out = Command::new(env!("CARGO_BIN_EXE_bonnet"))
        .args(["infer", "--ckpt", s(&ckpt), "--in", s(&volume), "--out", s(&via_env)])
        .env("BONNET_NUM_WORKERS", "2")
        .output()
        .unwrap();
    ok(out);
    assert_eq!(fs::read(&via_env).unwrap(), masks[0]);

    let (labels, meta) = read_labels(dir.path().join("mask_1.rawz")).unwrap();
    assert_eq!(meta.shape, [32, 32, 32]);
    assert!(labels.data.iter().all(|&l| l < 4));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("mask_1.rawz.run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "infer");
    for stage in ["preprocess", "forward", "fuse"] {
        assert!(manifest["timings"][stage].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn infer_errors() {
    let dir = TempDir::new().unwrap();
    let data = make_dataset(dir.path(), "1", "1");
    let volume = data.join("case_000.rawz");
    let mask = dir.path().join("m.rawz");
    let out = bonnet(&["infer", "--ckpt", s(&dir.path().join("missing.bnt")), "--in", s(&volume), "--out", s(&mask)]);
    assert_eq!(code(&out), 2);
    assert!(!mask.exists());
    let out = bonnet(&["infer", "--ckpt", s(&volume), "--in", s(&volume), "--out", s(&mask), "--workers", "0"]);
    assert_eq!(code(&out), 1);
}

fn cube(shape: [usize; 3], at: [usize; 3]) -> Volume<u16> {
    let mut v = Volume::filled(shape, 0u16);
    for z in at[2]..at[2] + 4 {
        for y in at[1]..at[1] + 4 {
            for x in at[0]..at[0] + 4 {
                v.set(x, y, z, 1);
            }
        }
    }
    v
}

fn eval_json(out: &Output) -> Vec<(String, f64)> {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    v.as_array()
        .unwrap()
        .iter()
        .map(|g| (g["group"].as_str().unwrap().to_string(), g["dice"].as_f64().unwrap()))
        .collect()
}

#[test]
fn eval_reports_groups_and_overall() {
    let dir = TempDir::new().unwrap();
    let (gt, pred, other) = (dir.path().join("gt.rawz"), dir.path().join("pred.rawz"), dir.path().join("o.rawz"));
    export_mask(&gt, &cube([8, 8, 8], [0, 0, 0]), [1.0; 3]).unwrap();
    export_mask(&pred, &cube([8, 8, 8], [2, 0, 0]), [1.0; 3]).unwrap();
    export_mask(&other, &cube([8, 8, 9], [0, 0, 0]), [1.0; 3]).unwrap();
    let groups = dir.path().join("groups.json");
    fs::write(&groups, r#"{"bone": [1]}"#).unwrap();

    let out = ok(bonnet(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--groups", s(&groups)]));
    assert_eq!(eval_json(&out), vec![("bone".into(), 100.0), ("overall".into(), 100.0)]);

    let out = ok(bonnet(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--groups", s(&groups)]));
    for (_, dice) in eval_json(&out) {
        assert!((dice - 50.0).abs() < 1e-9);
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("overall"));
    assert!(dir.path().join("pred.rawz.eval.json").exists());

    let missing = dir.path().join("missing.json");
    assert_eq!(code(&bonnet(&["eval", "--pred", s(&pred), "--gt", s(&gt), "--groups", s(&missing)])), 2);
    assert_eq!(code(&bonnet(&["eval", "--pred", s(&other), "--gt", s(&gt), "--groups", s(&groups)])), 2);
}

#[test]
fn bench_repeat_one_has_one_sample_per_stage() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = trained(dir.path(), "1");
    let report = dir.path().join("bench.json");
    ok(bonnet(&[
        "bench", "--ckpt", s(&ckpt), "--in", s(&data.join("case_000.rawz")), "--mode", "both", "--repeat", "1",
        "--precision", "f64", "--report", s(&report),
    ]));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let modes = v["report"]["modes"].as_array().unwrap();
    assert_eq!(modes.len(), 2);
    for m in modes {
        for stage in ["preprocess", "forward", "fuse"] {
            assert_eq!(m["samples"][stage].as_array().unwrap().len(), 1);
        }
    }
    assert!(v["report"]["speedup"].as_f64().unwrap() > 0.0);
    assert_eq!(v["report"]["agreement"]["label_agreement"].as_f64().unwrap(), 1.0);
    assert!(v["report"]["agreement"]["max_rel_err"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn preprocess_writes_a_readable_cache() {
    let dir = TempDir::new().unwrap();
    let data = make_dataset(dir.path(), "1", "2");
    let cache = dir.path().join("c.bnc");
    ok(bonnet(&["preprocess", "--in", s(&data.join("case_000.rawz")), "--out", s(&cache)]));
    let st = bonnet_core::io_ct::read_cache(&cache).unwrap();
    let (labels, _) = read_labels(data.join("case_000_labels.rawz")).unwrap();
    let labeled = labels.data.iter().filter(|&&l| l > 0).count();
    assert!(st.len() >= labeled && labeled > 0);
    assert!(st.features().iter().all(|&hu| (200.0..=3000.0).contains(&hu)));
}
