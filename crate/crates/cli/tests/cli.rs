//! End-to-end CLI behavior: artifact layout, determinism, config round-trip,
//! and exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_evimix"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("evimix-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn synth(dir: &Path) -> PathBuf {
    let status = bin()
        .args([
            "synth",
            "--out-dir",
            dir.join("data").to_str().unwrap(),
            "--name",
            "toy",
            "--views",
            "2",
            "--classes",
            "2",
            "--dims",
            "5,5",
            "--n",
            "60",
            "--seed",
            "3",
            "--class-separation",
            "2.0",
            "--view-noise",
            "0.2",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    dir.join("data").join("toy_manifest.json")
}

const TINY: &[&str] = &[
    "--runs",
    "1",
    "--seeds",
    "5",
    "--pretrain-epochs",
    "3",
    "--train-epochs",
    "3",
    "--batch-size",
    "64",
    "--attack-steps",
    "2",
];

#[test]
fn synth_writes_manifest_views_and_labels() {
    let dir = tmp("synth");
    let manifest = synth(&dir);
    assert!(manifest.exists());
    assert!(dir.join("data/toy_view0.csv").exists());
    assert!(dir.join("data/toy_view1.csv").exists());
    assert!(dir.join("data/toy_labels.csv").exists());
    let text = std::fs::read_to_string(dir.join("data/toy_view0.csv")).unwrap();
    assert_eq!(text.lines().count(), 60);
    std::fs::remove_dir_all(&dir).ok();
}

fn full_pipeline_in(dir: &Path, manifest: &Path, out_name: &str, run: &str) -> Vec<u8> {
    let out = dir.join(out_name);
    let status = bin()
        .args(["pretrain", "--manifest", manifest.to_str().unwrap()])
        .args(["--out-dir", out.to_str().unwrap(), "--run-name", run])
        .args(TINY)
        .status()
        .unwrap();
    assert!(status.success(), "pretrain failed");
    let ckpts = out.join(run).join("checkpoints");
    let status = bin()
        .args(["train", "--manifest", manifest.to_str().unwrap()])
        .args(["--out-dir", out.to_str().unwrap(), "--run-name", run])
        .args(["--pretrain-checkpoint", ckpts.to_str().unwrap()])
        .args(TINY)
        .status()
        .unwrap();
    assert!(status.success(), "train failed");
    let status = bin()
        .args(["eval", "--manifest", manifest.to_str().unwrap()])
        .args(["--out-dir", out.to_str().unwrap(), "--run-name", run])
        .args(["--model-checkpoint", ckpts.to_str().unwrap()])
        .args(TINY)
        .status()
        .unwrap();
    assert!(status.success(), "eval failed");
    std::fs::read(out.join(run).join("reports/report.json")).unwrap()
}

#[test]
fn pipeline_reports_are_byte_identical_across_executions() {
    let dir = tmp("determinism");
    let manifest = synth(&dir);
    let a = full_pipeline_in(&dir, &manifest, "out1", "r");
    let b = full_pipeline_in(&dir, &manifest, "out2", "r");
    assert_eq!(a, b, "reports differ between executions");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn eval_attacked_views_zero_equals_clean_accuracy() {
    let dir = tmp("clean-eval");
    let manifest = synth(&dir);
    let report = full_pipeline_in(&dir, &manifest, "out", "r");
    let json: serde_json::Value = serde_json::from_slice(&report).unwrap();
    let run = &json["runs"][0];
    assert_eq!(run["clean_acc"], run["attacked"]["0"]);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tmp("roundtrip");
    let manifest = synth(&dir);
    let first = full_pipeline_in(&dir, &manifest, "out1", "r");
    let resolved = dir.join("out1/r/config_resolved.json");
    assert!(resolved.exists());

    // re-feed the resolved config without any override flags
    let out = dir.join("out2");
    for (cmd, extra) in [
        ("pretrain", vec![]),
        ("train", vec!["--pretrain-checkpoint", "CKPT"]),
        ("eval", vec!["--model-checkpoint", "CKPT"]),
    ] {
        let ckpts = out.join("r").join("checkpoints");
        let ckpts_str = ckpts.to_str().unwrap().to_string();
        let mut args = vec![
            cmd.to_string(),
            "--manifest".into(),
            manifest.to_str().unwrap().into(),
            "--out-dir".into(),
            out.to_str().unwrap().into(),
            "--run-name".into(),
            "r".into(),
            "--config".into(),
            resolved.to_str().unwrap().into(),
        ];
        for e in extra {
            args.push(if e == "CKPT" { ckpts_str.clone() } else { e.into() });
        }
        let status = bin().args(&args).status().unwrap();
        assert!(status.success(), "{cmd} with resolved config failed");
    }
    let second = std::fs::read(out.join("r/reports/report.json")).unwrap();
    assert_eq!(first, second, "resolved config did not reproduce the run");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tmp("cfg-err");
    let manifest = synth(&dir);
    let status = bin()
        .args(["pretrain", "--manifest", manifest.to_str().unwrap()])
        .args(["--out-dir", dir.join("out").to_str().unwrap()])
        .args(["--runs", "2", "--seeds", "5"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn data_errors_exit_with_code_3() {
    let dir = tmp("data-err");
    let status = bin()
        .args(["pretrain", "--manifest", dir.join("missing.json").to_str().unwrap()])
        .args(["--out-dir", dir.join("out").to_str().unwrap()])
        .args(TINY)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn ablation_suite_produces_a_report_per_flag_set() {
    let dir = tmp("ablate");
    let manifest = synth(&dir);
    let status = bin()
        .args(["ablate", "--manifest", manifest.to_str().unwrap()])
        .args(["--out-dir", dir.join("out").to_str().unwrap(), "--run-name", "ab"])
        .args(TINY)
        .args(["--disable", "disentangle,attention"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.join("out/ab/reports/ablation_custom.json").exists());

    // reports aggregate into a Markdown table
    let status = bin()
        .args([
            "report",
            dir.join("out/ab/reports/ablation_custom.json").to_str().unwrap(),
            "--out",
            dir.join("out/summary.md").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let md = std::fs::read_to_string(dir.join("out/summary.md")).unwrap();
    assert!(md.contains("| Method |"));
    std::fs::remove_dir_all(&dir).ok();
}
