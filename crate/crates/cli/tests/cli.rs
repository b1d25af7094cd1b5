use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use polyfusion::tensor::Tensor;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_polyfusion"));
    c.env_remove("POLYFUSION_OUT");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = r#"{
        "task": "small",
        "data": {"synthetic": {"spec": {"generator": "additive", "trials_per_subject": 10, "noise": 0.5}, "seed": 4}},
        "model": {"kind": "lf", "width_divisor": 12, "output_dim": 8},
        "train": {"epochs": 2, "batch_size": 16}
    }"#;
    let p = dir.join("small.json");
    fs::write(&p, cfg).unwrap();
    p
}

#[test]
fn verify_passes_on_fresh_checkout() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for name in ["linear-blocks", "quadratic-blocks", "reconstruction", "fixtures", "gradients", "params", "shapes"] {
        assert!(out.lines().any(|l| l.starts_with(name) && l.contains("PASS")), "{name} missing:\n{out}");
    }
}

#[test]
fn verify_filter_runs_one_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify", "--filter", "linear"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().filter(|l| l.contains("PASS")).count(), 1);
    let o = run(&["verify", "--filter", "nothing-matches"], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn corrupted_factor_fails_verify() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    assert_eq!(code(&run(&["verify", "--write-fixtures", fx.to_str().unwrap()], dir.path())), 0);
    let o = run(&["verify", "--filter", "fixtures", "--fixtures", fx.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    let f = fx.join("tf.factor.2.bin");
    let mut t = Tensor::load(&f).unwrap();
    t.data_mut()[0] *= -1.5;
    t.save(&f).unwrap();
    let o = run(&["verify", "--filter", "fixtures", "--fixtures", fx.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL"));

    fs::write(&f, b"truncated").unwrap();
    let o = run(&["verify", "--filter", "fixtures", "--fixtures", fx.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn params_table_has_reference_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["params", "--json"], dir.path());
    assert_eq!(code(&o), 0);
    let rows: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let fusion = |v: &str| rows.as_array().unwrap().iter().find(|r| r["variant"] == v).unwrap()["fusion"].as_u64().unwrap();
    assert_eq!(fusion("lf"), 52_224);
    assert_eq!(fusion("tf full"), 318_504_960);
    assert_eq!(fusion("tf factorized"), 835_600);
    assert_eq!(fusion("pf3 symmetric"), 835_600);
}

#[test]
fn synth_raw_then_segment() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--raw", "--trials", "4", "--subjects", "2", "--out", "raw"], dir.path());
    assert_eq!(code(&o), 0);
    let o = run(&["segment", "--manifest", "raw/manifest.json", "--out", "seg"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ds = polyfusion::data::load_manifest(dir.path().join("seg/manifest.json")).unwrap();
    assert_eq!(ds.len(), 8 * 33);
    let o = run(&["segment", "--manifest", "missing.json", "--out", "seg2"], dir.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn synth_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert_eq!(code(&run(&["synth", "--trials", "2", "--seed", "3", "--out", out], dir.path())), 0);
    }
    for entry in fs::read_dir(dir.path().join("a/trials")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(dir.path().join("a/trials").join(&name)).unwrap();
        let b = fs::read(dir.path().join("b/trials").join(&name)).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(fs::read(dir.path().join("a/manifest.json")).unwrap(), fs::read(dir.path().join("b/manifest.json")).unwrap());
}

#[test]
fn cv_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for out in ["r1", "r2"] {
        let o = run(&["cv", "--config", cfg, "--out", out, "--folds", "0,2"], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    let (a, b) = (read("r1/cv_report.json"), read("r2/cv_report.json"));
    let (va, vb): (serde_json::Value, serde_json::Value) = (serde_json::from_slice(&a).unwrap(), serde_json::from_slice(&b).unwrap());
    assert_eq!(va["folds"], vb["folds"]);
    assert_eq!(va["config"]["output_dir"], "r1");
    assert_eq!(read("r1/cv_report.csv"), read("r2/cv_report.csv"));

    let report = va;
    assert_eq!(report["folds"].as_array().unwrap().len(), 2);
    assert_eq!(report["config"]["train"]["epochs"], 2);
    assert_eq!(report["library_version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(report["cv"]["seed"], 0);

    // Thread count changes nothing but the recorded config.
    let o = run(&["cv", "--config", cfg, "--out", "r3", "--folds", "0,2", "--jobs", "2"], dir.path());
    assert_eq!(code(&o), 0);
    let v3: serde_json::Value = serde_json::from_slice(&read("r3/cv_report.json")).unwrap();
    assert_eq!(v3["folds"], vb["folds"]);
}

#[test]
fn train_writes_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for out in ["t1", "t2"] {
        let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out, "--holdout", "1"], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("held-out accuracy"));
    }
    let mut names: Vec<_> = fs::read_dir(dir.path().join("t1/checkpoint")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n == "manifest.json"));
    for n in &names {
        assert_eq!(fs::read(dir.path().join("t1/checkpoint").join(n)).unwrap(), fs::read(dir.path().join("t2/checkpoint").join(n)).unwrap());
    }
    let a: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("t1/train_report.json")).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("t2/train_report.json")).unwrap()).unwrap();
    assert_eq!(a["report"], b["report"]);
    assert!(a["init_seed"].is_u64() && a["config"]["model"]["kind"] == "lf");
    polyfusion::models::ModelGraph::load(dir.path().join("t1/checkpoint")).unwrap();
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = bin()
        .args(["train", "--config", cfg.to_str().unwrap(), "--epochs", "1"])
        .current_dir(dir.path())
        .env("POLYFUSION_OUT", dir.path().join("envout"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("envout/small/train_report.json").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochs": 2, "learning_rate": 1}}"#).unwrap();
    let o = run(&["train", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    assert_eq!(code(&run(&["train", "--epochs", "0"], dir.path())), 1);
    assert_eq!(code(&run(&["cv", "--data", "absent/manifest.json"], dir.path())), 3);
    assert_eq!(code(&run(&["train", "--profile", "huge"], dir.path())), 2);
    assert_eq!(code(&run(&["frobnicate"], dir.path())), 2);
}
