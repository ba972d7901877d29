use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scrivener(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scrivener"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = scrivener(dir, args);
    assert!(
        out.status.success(),
        "scrivener {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

const CONFIG: &str = r#"{
  "dataset": {"n_records": 6, "split_fractions": [0.5, 0.25, 0.25]},
  "arch": {
    "image_h": 32, "image_w": 64,
    "backbone": {"stem": 2, "stages": [2,2,3,3], "blocks": [1,1,1,1],
                 "bottleneck": false, "stem_pool": false},
    "model": {"hidden": 8, "heads": 1, "layers": 1, "feedforward": 16,
              "dropout": 0.1, "max_decode": 500}
  },
  "training": {"scenario": "one_stage", "steps_per_phase": 2, "batch_size": 1, "seed": 4}
}"#;

#[test]
fn synth_train_eval_predict_score_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("cfg.json"), CONFIG).unwrap();

    let synth = run_ok(root, &["synth", "--config", "cfg.json", "--out", "data"]);
    assert!(synth.contains("6 records"), "{synth}");
    assert!(synth.contains("3 train"), "{synth}");
    let manifest = fs::read_to_string(root.join("data/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 6);
    for line in manifest.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(root.join("data").join(row["image"].as_str().unwrap()).exists());
    }

    let train = run_ok(root, &["train", "--config", "cfg.json", "--out", "run"]);
    assert!(train.contains("paragraph_tagged"), "{train}");
    for artifact in ["final.ckpt", "phase0.ckpt", "loss_trace.csv", "phase_log.json"] {
        assert!(root.join("run").join(artifact).exists(), "missing {artifact}");
    }

    run_ok(
        root,
        &[
            "eval", "--ckpt", "run/final.ckpt", "--manifest", "data/manifest.jsonl",
            "--split", "test", "--out", "eval.json",
        ],
    );
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["records"].as_array().unwrap().len(), 1);

    let predict = run_ok(
        root,
        &[
            "predict", "--ckpt", "run/final.ckpt", "--manifest", "data/manifest.jsonl",
            "--split", "test", "--out", "pred.jsonl",
        ],
    );
    assert!(predict.contains("wrote 1 predictions"), "{predict}");
    let pred_line = fs::read_to_string(root.join("pred.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(pred_line.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = row.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["id", "image", "lines", "split"]);

    run_ok(
        root,
        &[
            "score", "--pred", "pred.jsonl", "--ref", "data/manifest.jsonl",
            "--split", "test", "--out", "score.json",
        ],
    );
    let score: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("score.json")).unwrap()).unwrap();
    // Offline scoring of the model's own predictions reproduces eval exactly.
    for key in ["mean_basic", "mean_complete", "corpus_cer"] {
        assert_eq!(eval[key], score[key], "{key} differs between eval and score");
    }

    // Without a split filter every reference is scored; the five records
    // that have no prediction count as empty transcriptions.
    let all = scrivener(
        root,
        &["score", "--pred", "pred.jsonl", "--ref", "data/manifest.jsonl", "--out", "all.json"],
    );
    assert!(all.status.success());
    assert!(
        String::from_utf8_lossy(&all.stderr).contains("5 reference records had no prediction"),
    );
    let all: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("all.json")).unwrap()).unwrap();
    assert_eq!(all["n_scored"].as_u64().unwrap() + all["n_skipped"].as_u64().unwrap(), 6);
}

#[test]
fn resume_continues_a_finished_phase_count() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("cfg.json"), CONFIG.replace("one_stage", "two_stage")).unwrap();

    run_ok(root, &["train", "--config", "cfg.json", "--out", "run"]);
    // phase1.ckpt carries a cursor one past the final phase; resuming from
    // it is a no-op that still succeeds and reports no further steps.
    let resumed = run_ok(
        root,
        &[
            "train", "--config", "cfg.json", "--out", "run2", "--resume", "run/phase0.ckpt",
        ],
    );
    assert!(resumed.contains("phase 1"), "{resumed}");
    assert!(!resumed.contains("phase 0 ("), "{resumed}");
}

#[test]
fn exit_codes_distinguish_validation_from_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Usage problems and bad configs: exit 1.
    assert_eq!(scrivener(root, &["synth"]).status.code(), Some(1));
    assert_eq!(scrivener(root, &["no-such-command"]).status.code(), Some(1));
    fs::write(root.join("bad.json"), r#"{"arch": {"model": {"hidden": 3}}}"#).unwrap();
    let bad = scrivener(root, &["train", "--config", "bad.json", "--out", "run"]);
    assert_eq!(bad.status.code(), Some(1));

    // Runtime failures: exit 2.
    let missing = scrivener(
        root,
        &["eval", "--ckpt", "nope.ckpt", "--manifest", "nope.jsonl", "--split", "test"],
    );
    assert_eq!(missing.status.code(), Some(2));
    fs::write(root.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let junk = scrivener(
        root,
        &["eval", "--ckpt", "junk.ckpt", "--manifest", "nope.jsonl", "--split", "test"],
    );
    assert_eq!(junk.status.code(), Some(2));

    // Help is a success path.
    assert_eq!(scrivener(root, &["--help"]).status.code(), Some(0));
    assert_eq!(scrivener(root, &["train", "--help"]).status.code(), Some(0));
}
