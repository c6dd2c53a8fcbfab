use std::path::Path;
use std::process::{Command, Output};

use sqgan_core::networks::ModelConfig;
use sqgan_core::training::TrainConfig;

fn sqgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqgan"))
        .args(args)
        .env_remove("SQGAN_CKPT_DIR")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(sqgan(&["--no-such-flag"]).status.code(), Some(2));
    assert_eq!(sqgan(&["encode", "--image", "x.png"]).status.code(), Some(2));
    assert_eq!(sqgan(&[]).status.code(), Some(2));
    assert_eq!(sqgan(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_files_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = sqgan(&["decode", path(&dir.path().join("a.sqb")), "--ckpt", path(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn corrupt_checkpoint_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let stream = dir.path().join("a.sqb");
    std::fs::write(&stream, b"SQGB").unwrap();
    assert_eq!(sqgan(&["decode", path(&stream), "--ckpt", path(&ckpt)]).status.code(), Some(4));
}

#[test]
fn synth_train_encode_decode_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let out = sqgan(&["synth", "--out", path(&data), "--count", "2", "--height", "32", "--width", "64"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(&data).unwrap().count(), 4);

    let cfg = TrainConfig {
        model: ModelConfig::tiny(32, 64),
        batch: 2,
        epochs_stage: [1, 1, 1],
        ..TrainConfig::default()
    };
    let cfg_path = d.join("train.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let ckpt = d.join("model.ckpt");
    let curves = d.join("curves.csv");
    let out = sqgan(&[
        "train",
        "--data",
        path(&data),
        "--config",
        path(&cfg_path),
        "--out",
        path(&ckpt),
        "--curves",
        path(&curves),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&curves).unwrap().lines().count(), 3);

    let tuned = d.join("tuned.ckpt");
    let out = sqgan(&[
        "finetune",
        "--data",
        path(&data),
        "--config",
        path(&cfg_path),
        "--ckpt",
        path(&ckpt),
        "--out",
        path(&tuned),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut names: Vec<String> = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with("_labels.png"))
        .collect();
    names.sort();
    let stem = names[0].trim_end_matches("_labels.png").to_string();
    let image = data.join(format!("{stem}.png"));
    let labels = data.join(&names[0]);
    let stream = d.join("a.sqb");
    let out = sqgan(&[
        "encode",
        "--image",
        path(&image),
        "--ssm",
        path(&labels),
        "--mx",
        "0.35",
        "--ms",
        "0.35",
        "--mode",
        "fixed",
        "--out",
        path(&stream),
        "--ckpt",
        path(&tuned),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("N_x=2 N_s=2 bpp="), "{stdout}");

    let out = sqgan(&["decode", path(&stream), "--ckpt", path(&tuned)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("a.png").exists());
    assert!(d.join("a_labels.png").exists());

    // Relative checkpoint names resolve through the environment variable.
    let status = Command::new(env!("CARGO_BIN_EXE_sqgan"))
        .args(["decode", path(&stream), "--ckpt", "tuned.ckpt"])
        .env("SQGAN_CKPT_DIR", d)
        .status()
        .unwrap();
    assert!(status.success());

    let report = d.join("report");
    let out = sqgan(&[
        "eval",
        "--ckpt",
        path(&tuned),
        "--data",
        path(&data),
        "--mx",
        "0.35",
        "--ms",
        "0.55",
        "--out",
        path(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(report.join("records.csv")).unwrap().lines().count(), 3);
    assert_eq!(std::fs::read_to_string(report.join("fid.csv")).unwrap().lines().count(), 2);
    assert!(report.join("miou_vs_ms.svg").exists());

    let out = sqgan(&["plot", path(&report)]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);

    let out = sqgan(&[
        "encode",
        "--image",
        path(&image),
        "--ssm",
        path(&labels),
        "--mx",
        "1.5",
        "--ms",
        "0.35",
        "--out",
        path(&stream),
        "--ckpt",
        path(&tuned),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
