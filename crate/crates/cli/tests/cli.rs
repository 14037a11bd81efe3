mod common;

use std::process::{Command, Output};

fn dsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsf")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&dsf(&[])), 1);
    assert_eq!(code(&dsf(&["frobnicate"])), 1);
    assert_eq!(code(&dsf(&["train"])), 1);
    assert_eq!(code(&dsf(&["--help"])), 0);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::setup(dir.path(), "model.n = many\n");
    let out = dsf(&["train", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.n"));
    assert_eq!(code(&dsf(&["grad-check", "--op", "no_such_op"])), 2);
}

#[test]
fn data_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::setup(dir.path(), &common::small_config(4, "data.train_images = missing"));
    assert_eq!(code(&dsf(&["train", cfg.to_str().unwrap()])), 3);
    let cfg = common::setup(dir.path(), &common::small_config(4, ""));
    assert_eq!(code(&dsf(&["eval", cfg.to_str().unwrap(), "nope.ckpt"])), 3);
}

#[test]
fn numeric_failures_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::setup(dir.path(), &common::small_config(4, "train.epochs = 1\ntrain.lr = 1e300\ndata.train_size = 64"));
    let out = dsf(&["train", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_then_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::setup(dir.path(), &common::small_config(8, "train.epochs = 1\ndata.train_size = 32"));
    let cfg = cfg.to_str().unwrap();
    let out = dsf(&["train", cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("epoch,train_loss,train_acc,test_acc,wall_seconds\n1,"));

    let ckpt = dir.path().join("run/best.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let out = dsf(&["eval", cfg, ckpt]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("on 64 samples"));

    let filters = dir.path().join("filters");
    let out = dsf(&["export-filters", cfg, "--ckpt", ckpt, filters.to_str().unwrap()]);
    assert_eq!(code(&out), 0);

    let report = dir.path().join("report");
    let out = dsf(&["equiv-report", cfg, ckpt, "--image", "2", "--out", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("baseline_to_model_variance_ratio"));
}

#[test]
fn grad_check_single_op() {
    let out = dsf(&["grad-check", "--op", "relu"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("relu"));
}
