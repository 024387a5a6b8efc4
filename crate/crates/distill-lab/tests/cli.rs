//! End-to-end checks of the compiled binary: exit codes, artifact
//! determinism, and the mutation hook, all on a miniature config so the
//! whole file stays in test-suite time.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_distill-lab"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "seed": 11,
        "scene_seeds": [5, 6],
        "out_dir": dir.join("out"),
        "world": { "view": 12, "grid": 16, "degrade_severity": 0.6 },
        "schedule": { "kind": "cosine", "train_steps": 6 },
        "denoiser": {
            "image_size": 12,
            "base_channels": 4,
            "attn_heads": 2,
            "attn_resolution": 3,
            "num_classes": 6,
            "cond_drop_prob": 0.1
        },
        "train": { "epochs": 2, "lr": 0.05, "batch_size": 4, "num_scenes": 2, "views_per_scene": 2 },
        "rgnv": { "steps": 6, "inject_from": 3, "guidance": 1.5, "full_inversion": false },
        "sds": { "guidance": 1.5, "t_range": [0.2, 0.6], "w_kind": "constant", "lr": 0.05 },
        "rgsd": {
            "steps": 5,
            "inject_from": 3,
            "guidance": 1.5,
            "fixed_azimuths": [-1.5707963267948966, 1.5707963267948966],
            "lr": 0.05
        },
        "stages": { "coarse_iters": 4, "refine_iters": 4, "checkpoint_every": 2 },
        "metrics": { "psnr": true, "ssim": true, "mse": true }
    });
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_config_flag_exits_2() {
    let out = bin().arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("--config"));
}

#[test]
fn missing_config_file_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nope.json");
    let out = bin().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("nope.json"),
        "stderr must name the missing file: {}",
        stderr_of(&out)
    );
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{ "sede": 11 }"#).unwrap();
    let out = bin().args(["train", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
}

#[test]
fn unknown_loss_kind_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = bin()
        .args(["generate", "--loss-kind", "bogus", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("bogus"));
}

#[test]
fn enhance_without_weights_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = bin().args(["enhance", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr_of(&out));
    assert!(
        stderr_of(&out).contains("weights.dlw1"),
        "stderr must point at the missing weights: {}",
        stderr_of(&out)
    );
}

#[test]
fn training_twice_writes_byte_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for run in ["a", "b"] {
        let out = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(run))
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    }
    let weights_a = fs::read(dir.path().join("a/weights.dlw1")).unwrap();
    let weights_b = fs::read(dir.path().join("b/weights.dlw1")).unwrap();
    assert_eq!(weights_a, weights_b, "same config and seed, same weights");
    let loss_a = fs::read(dir.path().join("a/train_loss.csv")).unwrap();
    let loss_b = fs::read(dir.path().join("b/train_loss.csv")).unwrap();
    assert_eq!(loss_a, loss_b);
}

#[test]
fn seed_override_changes_the_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for (run, seed) in [("a", "11"), ("b", "12")] {
        let out = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .args(["--seed", seed, "--out"])
            .arg(dir.path().join(run))
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    }
    let weights_a = fs::read(dir.path().join("a/weights.dlw1")).unwrap();
    let weights_b = fs::read(dir.path().join("b/weights.dlw1")).unwrap();
    assert_ne!(weights_a, weights_b, "a different seed must retrain differently");
}

#[test]
fn round_trip_check_passes_and_the_mutation_hook_fails_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ok = bin()
        .args(["verify", "--check", "ac1", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "stderr: {}", stderr_of(&ok));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("[PASS] ac1"));

    let bad = bin()
        .args(["verify", "--check", "ac1", "--mutate", "invert-sign", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(4), "a flawed inversion must fail");
    assert!(String::from_utf8_lossy(&bad.stdout).contains("[FAIL] ac1"));
}

#[test]
fn unknown_check_id_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = bin()
        .args(["verify", "--check", "ac99", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("ac99"));
}

#[test]
fn unknown_mutation_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = bin()
        .args(["verify", "--mutate", "drop-noise", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("drop-noise"));
}
