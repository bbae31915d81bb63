//! CLI contract tests: exit codes, config validation, effective-config
//! persistence, and byte-identical reruns of seeded subcommands.

mod common;

use std::fs;
use std::path::Path;

use common::tree_digest;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["carnet"];
    argv.extend_from_slice(args);
    carnet::cli::dispatch(argv)
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn small_dataset(dir: &Path) -> String {
    let cfg = write_cfg(dir, "gen.cfg", "n_steps = 300\nwindow = 4\n");
    let out = dir.join("data");
    assert_eq!(
        run(&["generate-data", "--seed", "3", "--config", &cfg, "--out", out.to_str().unwrap()]),
        0
    );
    out.join("dataset").to_string_lossy().into_owned()
}

#[test]
fn generate_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "gen.cfg", "n_steps = 300\nwindow = 4\n");
    for out in ["a", "b"] {
        let out = dir.path().join(out);
        assert_eq!(
            run(&["generate-data", "--seed", "7", "--config", &cfg, "--out", out.to_str().unwrap()]),
            0
        );
    }
    assert_eq!(
        tree_digest(&dir.path().join("a")),
        tree_digest(&dir.path().join("b"))
    );
}

#[test]
fn missing_dataset_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["train-il", "--out", out.to_str().unwrap()]), 2);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.cfg", "n_stepz = 10\n");
    let out = dir.path().join("out");
    assert_eq!(
        run(&["generate-data", "--config", &cfg, "--out", out.to_str().unwrap()]),
        2
    );
}

#[test]
fn bad_device_and_bad_split_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        run(&["generate-data", "--out", out.to_str().unwrap(), "--device", "cuda"]),
        2
    );
    assert_eq!(
        run(&["eval", "--checkpoint", "/nonexistent.ckpt", "--split", "nope"]),
        2
    );
}

#[test]
fn unreadable_dataset_path_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "il.cfg", "data = /nonexistent/dataset\n");
    let out = dir.path().join("out");
    assert_eq!(
        run(&["train-il", "--config", &cfg, "--out", out.to_str().unwrap()]),
        2
    );
}

#[test]
fn training_runs_are_byte_identical_and_write_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = write_cfg(
        dir.path(),
        "pre.cfg",
        &format!("data = {data}\nepochs = 1\nbatch_size = 16\n"),
    );
    for out in ["p1", "p2"] {
        let out = dir.path().join(out);
        assert_eq!(
            run(&["pretrain-ae", "--seed", "5", "--config", &cfg, "--out", out.to_str().unwrap()]),
            0
        );
    }
    let p1 = dir.path().join("p1");
    assert_eq!(tree_digest(&p1), tree_digest(&dir.path().join("p2")));

    let eff = fs::read_to_string(p1.join("config_effective.txt")).unwrap();
    for key in ["data", "epochs", "batch_size", "lr", "patience", "seed", "latent"] {
        assert!(eff.contains(&format!("{key} = ")), "missing {key} in:\n{eff}");
    }
    assert!(p1.join("pretrain.ckpt").exists());
    let metrics = fs::read_to_string(p1.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(carnet::metrics::HEADER));
    assert_eq!(metrics.lines().count(), 2); // header + one epoch
}

#[test]
fn il_pipeline_eval_and_export_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let il_out = dir.path().join("il");
    let cfg = write_cfg(
        dir.path(),
        "il.cfg",
        &format!("data = {data}\nepochs = 1\nbatch_size = 16\njoint = false\n"),
    );
    assert_eq!(
        run(&["train-il", "--seed", "1", "--config", &cfg, "--out", il_out.to_str().unwrap()]),
        0
    );
    let ckpt = il_out.join("il.ckpt");
    assert!(ckpt.exists());

    let eval_cfg = write_cfg(dir.path(), "eval.cfg", &format!("data = {data}\n"));
    assert_eq!(
        run(&[
            "eval",
            "--config",
            &eval_cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--split",
            "test",
        ]),
        0
    );

    let merged = dir.path().join("merged.csv");
    assert_eq!(
        run(&[
            "export-metrics",
            il_out.join("metrics.csv").to_str().unwrap(),
            "--out",
            merged.to_str().unwrap(),
        ]),
        0
    );
    let text = fs::read_to_string(&merged).unwrap();
    assert!(text.starts_with(carnet::metrics::HEADER));
    assert!(text.lines().count() >= 2);
    // RFC-4180 style: every row has the same column count
    let cols = carnet::metrics::HEADER.split(',').count();
    for line in text.lines() {
        assert_eq!(line.split(',').count(), cols, "{line}");
    }
}

#[test]
fn rl_smoke_run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "rl.cfg",
        "training_steps = 60\nbuffer_capacity = 100\nbatch_size = 8\nlearn_start = 16\ntarget_sync = 25\neval_episodes = 1\n",
    );
    for out in ["r1", "r2"] {
        let out = dir.path().join(out);
        assert_eq!(
            run(&["train-rl", "--seed", "9", "--config", &cfg, "--out", out.to_str().unwrap()]),
            0
        );
    }
    assert_eq!(
        tree_digest(&dir.path().join("r1")),
        tree_digest(&dir.path().join("r2"))
    );
}
