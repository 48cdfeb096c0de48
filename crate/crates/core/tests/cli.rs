//! End-to-end checks of the `hga` binary: artifacts and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hga(args: &[&str], extra: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hga"));
    cmd.env("RUST_LOG", "warn").args(args);
    for p in extra {
        cmd.arg(p);
    }
    cmd.output().unwrap()
}

fn run(args: &[&str]) -> Output {
    hga(args, &[])
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

const SMALL: &str = r#"{
  "dataset": {"synthetic": {"n_target": 90, "n_aux": 12, "train_per_class": 5, "p_in": 0.2, "p_out": 0.02}},
  "encoder": {"d": 16},
  "adapter": {"k": 5},
  "trainer": {"epochs": 15}
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn malformed_config_exits_2_and_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", "{\n  \"trainer\": {\"lr\": }\n}");
    let out = run(&["tune", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.json") && err.contains("line 2"), "{err}");
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"dataset": {"path": "does/not/exist"}}"#);
    let out = run(&["tune", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let missing = run(&["tune", "--config", s(&dir.path().join("nope.json"))]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn corrupted_gradient_fails_the_check() {
    let out = run(&["gradcheck", "--corrupt-gradient"]);
    assert_eq!(code(&out), 1);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pass"], false);
    assert!(v["max_rel_error"].as_f64().unwrap() > 1e-4);
    assert_eq!(code(&run(&["gradcheck", "--seed", "3"])), 0);
}

#[test]
fn divergence_exits_3_and_keeps_partial_history() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace(r#""epochs": 15"#, r#""epochs": 15, "lr": 1e300"#);
    let cfg = write_config(dir.path(), "c.json", &text);
    let o = dir.path().join("o");
    let out = run(&["tune", "--config", s(&cfg), "--out", s(&o)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let history = fs::read_to_string(o.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,l_con,l_rec,l_mar,j,train_err,test_err,homophily,wall_ms\n"));
    assert!(history.lines().count() >= 2, "{history}");
}

#[test]
fn gen_is_a_pure_function_of_spec_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_config(dir.path(), "g.json", r#"{"n_target": 60, "n_aux": 9, "train_per_class": 4, "p_in": 0.3, "p_out": 0.03}"#);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for (out, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        assert_eq!(code(&run(&["gen", "--config", s(&spec), "--seed", seed, "--out", s(out)])), 0);
    }
    let files = |d: &Path| {
        let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
            .collect();
        v.sort();
        v
    };
    assert_eq!(files(&a), files(&b));
    assert_ne!(files(&a), files(&c));

    // the generated directory is a valid dataset
    let cfg = write_config(dir.path(), "run.json", r#"{"dataset": {"path": "a"}, "encoder": {"d": 16}, "adapter": {"k": 4}, "trainer": {"epochs": 5}}"#);
    let out = run(&["tune", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn tune_export_then_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let o = dir.path().join("o");
    let out = run(&["tune", "--config", s(&cfg), "--out", s(&o), "--export"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "history.csv", "adapter.bin", "metrics.json", "A.csv", "S.csv", "Z.csv"] {
        assert!(o.join(f).is_file(), "missing {f}");
    }
    let tuned: serde_json::Value = serde_json::from_str(&fs::read_to_string(o.join("metrics.json")).unwrap()).unwrap();
    for key in ["macro_f1", "micro_f1", "nmi", "ari", "train_error", "test_error", "generalization_gap", "final_homophily", "config_fingerprint", "seed"] {
        assert!(!tuned["metrics"][key].is_null(), "metrics.{key} missing");
    }
    assert_eq!(fs::read_to_string(o.join("history.csv")).unwrap().lines().count(), 16);
    assert!(fs::read_to_string(o.join("A.csv")).unwrap().starts_with("row,col,weight\n"));

    let e = dir.path().join("e");
    let out = hga(&["eval", "--config", s(&cfg), "--out", s(&e), "--checkpoint"], &[&o.join("adapter.bin")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let evaluated: serde_json::Value = serde_json::from_str(&fs::read_to_string(e.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(tuned["metrics"], evaluated["metrics"]);
}

#[test]
fn pretrained_checkpoint_is_not_modified_by_tuning() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace(r#""encoder": {"d": 16}"#, r#""encoder": {"d": 16, "pretrain_epochs": 10}"#);
    let cfg = write_config(dir.path(), "c.json", &text);
    let p = dir.path().join("p");
    assert_eq!(code(&run(&["pretrain", "--config", s(&cfg), "--out", s(&p)])), 0);
    let ckpt = p.join("encoder.bin");
    let before = fs::read(&ckpt).unwrap();
    let text = SMALL.replace(r#""encoder": {"d": 16}"#, &format!(r#""encoder": {{"checkpoint": {:?}}}"#, s(&ckpt)));
    let cfg = write_config(dir.path(), "t.json", &text);
    let out = run(&["tune", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&ckpt).unwrap(), before);
}

#[test]
fn ablate_writes_one_row_per_cell_independent_of_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", SMALL);
    let grid = write_config(
        dir.path(),
        "grid.json",
        r#"{"cells": ["full", "drop_Lrec", {"name": "alpha_small", "set": {"adapter.alpha": 0.1}}]}"#,
    );
    let mut csvs = Vec::new();
    for jobs in ["1", "3"] {
        let o = dir.path().join(format!("o{jobs}"));
        let out = run(&["ablate", "--config", s(&cfg), "--grid", s(&grid), "--jobs", jobs, "--out", s(&o)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        csvs.push(fs::read_to_string(o.join("ablation.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let lines: Vec<&str> = csvs[0].lines().collect();
    assert_eq!(lines[0], "variant,macro_f1,micro_f1,nmi,ari,train_err,test_err,gap,homophily,seed");
    let variants: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["full", "drop_Lrec", "alpha_small"]);

    let bad = write_config(dir.path(), "bad.json", r#"["drop_everything"]"#);
    let out = run(&["ablate", "--config", s(&cfg), "--grid", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn shipped_configs_are_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["default.json", "gradcheck_tiny.json"] {
        let cfg = hga_core::config::RunConfig::load(&root.join(name)).unwrap();
        cfg.validate().unwrap();
    }
    assert_eq!(
        hga_core::config::RunConfig::load(&root.join("default.json")).unwrap(),
        hga_core::config::RunConfig::default()
    );
    let grid = fs::read_to_string(root.join("objective_grid.json")).unwrap();
    assert_eq!(hga_core::eval::parse_grid(&grid).unwrap().len(), 7);
}
