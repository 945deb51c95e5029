use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "dataset": {"n_subjects": 2, "n_train": 24, "n_test": 12, "trials_per_run": 12, "resolution": 16,
              "subject": {"voxels_min": 40, "voxels_max": 60}},
  "model": {
    "unet": {"resolution": 16, "base_channels": 8, "channel_mults": [1, 2], "attention": [false, true],
             "temb_dim": 16, "groups": 4, "tokens": 4, "token_dim": 8},
    "brain": {"hidden": 12, "tokens": 4, "token_dim": 8},
    "sampler": {"steps": 4}
  },
  "pretrain": {"steps": 3, "batch_size": 2, "warmup_steps": 1},
  "train": {"steps": 4, "batch_size": 4, "warmup_steps": 2}
}"#;

fn bolddecode(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bolddecode"))
        .arg("-q")
        .arg("--root")
        .arg(root)
        .args(args)
        .env_remove("BOLDDECODE_OUT")
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = bolddecode(root, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Tiny config written next to the runs; returns (tempdir, root, config).
fn setup() -> (tempfile::TempDir, PathBuf, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let root = dir.path().join("runs");
    (dir, root, cfg.to_string_lossy().into_owned())
}

fn prepared(root: &Path, cfg: &str) {
    ok(root, &["--config", cfg, "gen-data"]);
    ok(root, &["--config", cfg, "preprocess"]);
    ok(root, &["--config", cfg, "pretrain-gen"]);
}

fn bin_files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "bin") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn selftest_passes_and_records_its_config() {
    let (_d, root, _) = setup();
    let stdout = ok(&root, &["selftest", "--draws", "200000"]);
    assert!(stdout.contains("checks passed"), "{stdout}");
    assert!(!stdout.contains("[FAIL]"));
    assert!(root.join("selftest/selftest.json").is_file());
    assert!(root.join("selftest/resolved_config.json").is_file());
}

#[test]
fn unknown_and_invalid_keys_exit_2_with_the_path() {
    let (_d, root, cfg) = setup();
    let out = bolddecode(&root, &["--config", &cfg, "--train.stepz=3", "selftest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.stepz"));

    let out = bolddecode(&root, &["--model.brain.hiden", "3", "selftest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.brain.hiden"));

    let out = bolddecode(&root, &["--train.cond_dropout=1.5", "selftest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.cond_dropout"));

    let bad = root.parent().unwrap().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"steps": 4, "momentum": 0.9}}"#).unwrap();
    let out = bolddecode(&root, &["--config", bad.to_str().unwrap(), "selftest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.momentum"));

    let out = bolddecode(&root, &["train", "--regime", "everything"]);
    assert_eq!(out.status.code(), Some(2));
}

/// Bytes of every tensor under `prefix`, keyed by tensor name.
fn tensors(ck: &Path, prefix: &str) -> Vec<(String, Vec<u8>)> {
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(ck.join("manifest.json")).unwrap()).unwrap();
    let mut out: Vec<_> = m["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|t| t["name"].as_str().unwrap().starts_with(prefix))
        .map(|t| {
            (t["name"].as_str().unwrap().to_string(), std::fs::read(ck.join(t["file"].as_str().unwrap())).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn pipeline_runs_end_to_end() {
    let (_d, root, cfg) = setup();
    prepared(&root, &cfg);
    ok(&root, &["--config", &cfg, "train", "--regime", "none", "--name", "frozen", "--subjects", "0"]);
    let ck = root.join("train/frozen/sub0");
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(ck.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(meta["extra"]["train"]["finetune_regime"], "none");

    let model = root.join("train/frozen");
    let stdout = ok(&root, &["--config", &cfg, "eval", "--model", model.to_str().unwrap()]);
    assert!(stdout.contains("id_low"), "{stdout}");
    for f in ["report.json", "report.csv", "resolved_config.json"] {
        assert!(root.join("eval/frozen").join(f).is_file(), "{f}");
    }
    ok(&root, &["--config", &cfg, "infer", "--model", model.to_str().unwrap(), "--limit", "2"]);
    let inf = root.join("infer/frozen");
    for f in ["reconstructions.json", "reconstructions.bin", "preview.ppm"] {
        assert!(inf.join(f).is_file(), "{f}");
    }
    let prov: serde_json::Value =
        serde_json::from_slice(&std::fs::read(inf.join("reconstructions.json")).unwrap()).unwrap();
    assert_eq!(prov.as_array().unwrap().len(), 2);

    ok(&root, &["--config", &cfg, "eval", "--baseline", "perfect", "--name", "perfect"]);
    let rep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("eval/perfect/report.json")).unwrap()).unwrap();
    assert_eq!(rep["summary"]["id_low"]["mean"], 100.0, "{}", rep["summary"]);

    let out = bolddecode(&root, &["--config", &cfg, "eval", "--model", root.join("pretrain").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrained generator"));
}

#[test]
fn frozen_regime_keeps_the_pretrained_generator() {
    let (_d, root, cfg) = setup();
    prepared(&root, &cfg);
    ok(&root, &["--config", &cfg, "train", "--regime", "none", "--name", "frozen", "--subjects", "0"]);
    ok(&root, &["--config", &cfg, "train", "--regime", "all", "--name", "full", "--subjects", "0"]);
    let pre = tensors(&root.join("pretrain"), "unet/");
    assert!(!pre.is_empty());
    assert_eq!(tensors(&root.join("train/frozen/sub0"), "unet/"), pre);
    assert_ne!(tensors(&root.join("train/full/sub0"), "unet/"), pre);
}

#[test]
fn replay_is_bitwise_identical() {
    let (_d, root, cfg) = setup();
    prepared(&root, &cfg);
    ok(&root, &["--config", &cfg, "train", "--name", "a", "--subjects", "1", "--delta", "3tr"]);
    let recorded = root.parent().unwrap().join("replay.json");
    std::fs::copy(root.join("train/a/resolved_config.json"), &recorded).unwrap();
    let text = std::fs::read_to_string(&recorded).unwrap();
    assert!(text.contains("\"command\": \"train\""), "{text}");

    let first = bin_files(&root.join("train/a"));
    std::fs::remove_dir_all(root.join("train/a")).unwrap();
    ok(&root, &["replay", recorded.to_str().unwrap()]);
    let second = bin_files(&root.join("train/a"));
    assert!(!first.is_empty());
    assert!(first == second, "replayed tensors differ");
    assert_eq!(std::fs::read_to_string(root.join("train/a/resolved_config.json")).unwrap(), text);
}

#[test]
fn time_sweep_trains_missing_models_and_emits_every_shift() {
    let (_d, root, cfg) = setup();
    prepared(&root, &cfg);
    let stdout = ok(&root, &["--config", &cfg, "sweep-time", "--subjects", "0"]);
    assert!(stdout.contains("16 shifts"), "{stdout}");
    let sweep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(root.join("sweeps/time/sweep_time.json")).unwrap()).unwrap();
    assert_eq!(sweep["points"].as_array().unwrap().len(), 16);
    for k in ["time_general", "time_delta-3tr", "time_delta3tr", "time_delta6tr"] {
        assert!(root.join("train").join(k).join("sub0/manifest.json").is_file(), "{k}");
    }
    // second run reuses the trained models
    let out = bolddecode(&root, &["--config", &cfg, "sweep-time", "--subjects", "0", "--no-train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn multi_subject_then_adaptation() {
    let (_d, root, cfg) = setup();
    prepared(&root, &cfg);
    ok(&root, &["--config", &cfg, "train", "--multi-subject", "--subjects", "0", "--name", "base"]);
    let base = root.join("train/base");
    ok(
        &root,
        &[
            "--config",
            &cfg,
            "train",
            "--adapt-subject",
            "1",
            "--base",
            base.to_str().unwrap(),
            "--sessions",
            "2",
            "--name",
            "ad",
        ],
    );
    assert!(root.join("train/ad/adapt_sub1/manifest.json").is_file());
    let out = bolddecode(
        &root,
        &["--config", &cfg, "train", "--adapt-subject", "0", "--base", base.to_str().unwrap(), "--name", "bad"],
    );
    assert_eq!(out.status.code(), Some(1), "subject 0 is already in the base model");
}

#[test]
fn missing_inputs_are_reported() {
    let (_d, root, cfg) = setup();
    let out = bolddecode(&root, &["--config", &cfg, "preprocess"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}
