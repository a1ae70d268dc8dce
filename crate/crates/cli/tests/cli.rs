//! End-to-end tests of the `marl` binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_marl"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("marl_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn write_small_config(dir: &Path, data: &Path, out: &Path, seed: u64) -> PathBuf {
    let cfg = serde_json::json!({
        "train_manifest": data.join("manifest.csv"),
        "eval_manifest": data.join("manifest.csv"),
        "out_dir": out,
        "classes": 5,
        "image_size": 16,
        "d": 16,
        "decoder_layers": 1,
        "decoder_heads": 2,
        "backbone_channels": [8, 16],
        "backbone_strides": [2, 2],
        "backbone_final_pool": false,
        "multiscale_channels": 8,
        "epochs": 1,
        "bootstrap_resamples": 0,
        "seed": seed
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_synthetic_twice_produces_identical_trees() {
    let dir = tmp("gen_det");
    for name in ["a", "b"] {
        let status = bin()
            .args([
                "gen-synthetic",
                "--out",
                dir.join(name).to_str().unwrap(),
                "--seed",
                "7",
                "--classes",
                "5",
                "--samples",
                "12",
                "--size",
                "16",
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(tree_bytes(&dir.join("a")), tree_bytes(&dir.join("b")));
}

#[test]
fn missing_dataset_path_exits_1_and_names_the_field() {
    let dir = tmp("missing_data");
    let cfg = serde_json::json!({
        "train_manifest": dir.join("nope.csv"),
        "eval_manifest": dir.join("nope.csv"),
        "out_dir": dir.join("run"),
        "classes": 5,
        "image_size": 64,
        "seed": 1
    });
    let cfg_path = dir.join("run.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = bin()
        .args(["train", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train_manifest"), "{stderr}");
}

#[test]
fn unknown_flags_are_rejected_with_exit_1() {
    let out = bin().args(["train", "--definitely-not-a-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_fields_are_rejected_by_name() {
    let dir = tmp("unknown_field");
    let cfg_path = dir.join("run.json");
    std::fs::write(
        &cfg_path,
        r#"{"train_manifest":"x","eval_manifest":"x","out_dir":"y",
            "classes":5,"image_size":64,"seed":1,"typo_field":true}"#,
    )
    .unwrap();
    let out = bin()
        .args(["train", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo_field"));
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tmp("roundtrip");
    let data = dir.join("data");
    assert!(bin()
        .args([
            "gen-synthetic",
            "--out",
            data.to_str().unwrap(),
            "--seed",
            "3",
            "--classes",
            "5",
            "--samples",
            "80",
            "--size",
            "16",
            "--noise",
            "0",
        ])
        .status()
        .unwrap()
        .success());
    let cfg_path = write_small_config(&dir, &data, &dir.join("run"), 4);
    assert!(bin()
        .args(["train", "--config", cfg_path.to_str().unwrap()])
        .status()
        .unwrap()
        .success());
    // rerunning without overwrite is refused
    let again = bin()
        .args(["train", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(again.status.code(), Some(1));
    // with the flag it is allowed
    assert!(bin()
        .args([
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--overwrite",
        ])
        .status()
        .unwrap()
        .success());

    let ckpt = dir.join("run/checkpoints/best.ckpt");
    assert!(bin()
        .args([
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            data.join("manifest.csv").to_str().unwrap(),
            "--out",
            dir.join("eval").to_str().unwrap(),
            "--resamples",
            "50",
        ])
        .status()
        .unwrap()
        .success());
    assert!(dir.join("eval/metrics.json").is_file());

    assert!(bin()
        .args([
            "export-attn",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--manifest",
            data.join("manifest.csv").to_str().unwrap(),
            "--index",
            "1",
            "--out",
            dir.join("attn").to_str().unwrap(),
        ])
        .status()
        .unwrap()
        .success());
    // 1 layer x 2 heads x 5 classes x (png+csv) + 2 mean pngs + posmap png/csv
    assert_eq!(std::fs::read_dir(dir.join("attn")).unwrap().count(), 24);
}

#[test]
fn ablate_emits_the_nine_row_grid() {
    let dir = tmp("ablate");
    let data = dir.join("data");
    assert!(bin()
        .args([
            "gen-synthetic",
            "--out",
            data.to_str().unwrap(),
            "--seed",
            "5",
            "--classes",
            "5",
            "--samples",
            "64",
            "--size",
            "16",
        ])
        .status()
        .unwrap()
        .success());
    let cfg_path = write_small_config(&dir, &data, &dir.join("unused"), 2);
    assert!(bin()
        .args([
            "ablate",
            "--config",
            cfg_path.to_str().unwrap(),
            "--epochs",
            "1",
            "--out-dir",
            dir.join("grid").to_str().unwrap(),
            "--jobs",
            "2",
        ])
        .status()
        .unwrap()
        .success());
    let csv = std::fs::read_to_string(dir.join("grid/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10, "header + 9 rows:\n{csv}");
    assert!(dir.join("grid/ablation.md").is_file());

    assert!(bin()
        .args([
            "sweep-epsilon",
            "--config",
            cfg_path.to_str().unwrap(),
            "--eps",
            "0.2,0.8",
            "--epochs",
            "1",
            "--out-dir",
            dir.join("sweep").to_str().unwrap(),
            "--jobs",
            "2",
        ])
        .status()
        .unwrap()
        .success());
    let sweep = std::fs::read_to_string(dir.join("sweep/epsilon_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3, "header + 2 rows:\n{sweep}");
}

#[test]
fn out_root_env_var_resolves_relative_paths() {
    let dir = tmp("out_root");
    let status = bin()
        .env("MARL_OUT_ROOT", &dir)
        .args([
            "gen-synthetic",
            "--out",
            "nested/data",
            "--seed",
            "1",
            "--classes",
            "5",
            "--samples",
            "4",
            "--size",
            "16",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.join("nested/data/manifest.csv").is_file());
}
