use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mammoclip::manifest::Manifest;
use serde_json::Value;

fn mammoclip(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mammoclip"))
        .current_dir(dir)
        .env_remove("MAMMOCLIP_RUN_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = mammoclip(dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// generate → preprocess → split in `dir/r`.
fn small_pipeline(dir: &Path) {
    ok(dir, &["--run-dir", "r", "--seed", "3", "generate", "--per-class", "6"]);
    ok(dir, &["--run-dir", "r", "preprocess", "--manifest", "r/generate/manifest.jsonl"]);
    ok(dir, &["--run-dir", "r", "--seed", "3", "split", "--manifest", "r/preprocess/manifest.jsonl", "--k", "2"]);
}

#[test]
fn generate_writes_the_requested_images_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--out", "g", "generate", "--classes", "4", "--per-class", "250", "--seed", "7"]);
    let pngs = fs::read_dir(dir.path().join("g/images"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 1000);
    let manifest = Manifest::load(&dir.path().join("g/manifest.jsonl")).unwrap();
    assert_eq!(manifest.len(), 1000);
    let summary = json(&dir.path().join("g/summary.json"));
    assert_eq!(summary["class_counts"], serde_json::json!([250, 250, 250, 250]));
}

#[test]
fn fewer_classes_leave_the_rest_empty() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--out", "g", "generate", "--classes", "2", "--per-class", "3"]);
    let summary = json(&dir.path().join("g/summary.json"));
    assert_eq!(summary["class_counts"], serde_json::json!([3, 3, 0, 0]));
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d);
    ok(
        d,
        &[
            "--run-dir", "r", "train", "--manifest", "r/split/manifest.jsonl", "--folds", "r/split/folds.json",
            "--epochs", "1", "--batch-size", "4",
        ],
    );
    for f in ["fold0.ckpt", "fold1.ckpt", "fold0.log.jsonl", "aggregate.json"] {
        assert!(d.join("r/train").join(f).is_file(), "{f}");
    }
    ok(
        d,
        &[
            "--run-dir", "r", "evaluate", "--checkpoint", "r/train/fold0.ckpt", "--manifest",
            "r/split/manifest.jsonl", "--folds", "r/split/folds.json", "--fold", "0", "--audit-split",
            "r/split/folds.json",
        ],
    );
    let summary = json(&d.join("r/evaluate/summary.json"));
    assert_eq!(summary["split_audit"]["leakage"], false);
    assert!(summary["evaluation"]["samples"].as_u64().unwrap() > 0);
    assert!(d.join("r/evaluate/confusion.csv").is_file());

    ok(d, &["--run-dir", "r", "zero-shot", "--checkpoint", "r/train/fold0.ckpt", "--manifest", "r/generate/manifest.jsonl"]);
    let predictions = fs::read_to_string(d.join("r/zero-shot/predictions.csv")).unwrap();
    assert_eq!(predictions.lines().count(), 25);

    ok(
        d,
        &[
            "--run-dir", "r", "gradcam", "--checkpoint", "r/train/fold0.ckpt", "--manifest",
            "r/preprocess/manifest.jsonl", "--limit", "2", "--class", "D",
        ],
    );
    let summary = json(&d.join("r/gradcam/summary.json"));
    assert_eq!(summary["maps"].as_array().unwrap().len(), 2);
    assert_eq!(summary["maps"][0]["target"], "D");
}

#[test]
fn run_directory_records_provenance() {
    let dir = tempfile::tempdir().unwrap();
    small_pipeline(dir.path());
    let p = json(&dir.path().join("r/split/provenance.json"));
    assert_eq!(p["command"], "split");
    assert_eq!(p["seed"], 3);
    assert!(p["config"].as_str().unwrap().contains("split.k = 2"));
    let digest = p["inputs"][0]["sha256"].as_str().unwrap();
    assert_eq!(digest.len(), 64);
}

#[test]
fn refuses_to_clobber_without_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["--out", "g", "--seed", "5", "generate", "--per-class", "2"];
    ok(d, &args);
    let first = fs::read(d.join("g/manifest.jsonl")).unwrap();
    assert_eq!(code(&mammoclip(d, &args)), 1);

    let mut again = args.to_vec();
    again.insert(0, "--overwrite");
    ok(d, &again);
    assert_eq!(fs::read(d.join("g/manifest.jsonl")).unwrap(), first);

    fs::create_dir(d.join("precious")).unwrap();
    fs::write(d.join("precious/notes.txt"), "keep").unwrap();
    let out = mammoclip(d, &["--overwrite", "--out", "precious", "generate", "--per-class", "1"]);
    assert_eq!(code(&out), 1);
    assert!(d.join("precious/notes.txt").is_file());
}

#[test]
fn run_dir_defaults_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mammoclip"))
        .current_dir(dir.path())
        .env("MAMMOCLIP_RUN_DIR", "from-env")
        .args(["generate", "--per-class", "1"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(dir.path().join("from-env/generate/summary.json").is_file());
}

#[test]
fn config_file_supplies_settings_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("good.kv"), "# run settings\nseed = 11\nrun_dir = cfg\n").unwrap();
    ok(d, &["--config", "good.kv", "generate", "--per-class", "1"]);
    assert_eq!(json(&d.join("cfg/generate/provenance.json"))["seed"], 11);

    fs::write(d.join("bad.kv"), "seed = 1\ncolour = red\n").unwrap();
    let out = mammoclip(d, &["--config", "bad.kv", "generate", "--per-class", "1"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    fs::write(d.join("typo.kv"), "train.epochz = 3\n").unwrap();
    small_pipeline(d);
    let out = mammoclip(
        d,
        &["--config", "typo.kv", "--run-dir", "r", "train", "--manifest", "r/split/manifest.jsonl", "--folds", "r/split/folds.json"],
    );
    assert_eq!(code(&out), 1);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&mammoclip(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&mammoclip(dir.path(), &["generate", "--classes", "5"])), 1);
    assert_eq!(code(&mammoclip(dir.path(), &["--jobs", "0", "generate"])), 1);
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mammoclip(dir.path(), &["preprocess", "--manifest", "nowhere/manifest.jsonl"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn malformed_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.jsonl"), "{\"patient_id\": 3}\n").unwrap();
    let out = mammoclip(dir.path(), &["split", "--manifest", "m.jsonl"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn partial_failures_are_listed_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--out", "g", "generate", "--per-class", "2"]);
    let manifest = Manifest::load(&d.join("g/manifest.jsonl")).unwrap();
    let victim = manifest.records[0].image_path.clone();
    fs::write(d.join("g").join(&victim), b"not a png").unwrap();

    let out = mammoclip(d, &["--out", "p", "preprocess", "--manifest", "g/manifest.jsonl"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains(&victim));
    let summary = json(&d.join("p/summary.json"));
    assert_eq!(summary["failures"][0]["item"], victim.as_str());
    assert_eq!(summary["output_images"], summary["input_images"].as_u64().unwrap() - 1);
}

#[test]
fn divergent_training_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d);
    fs::write(d.join("sgd.kv"), "train.optimizer = sgd\n").unwrap();
    let out = mammoclip(
        d,
        &[
            "--config", "sgd.kv", "--run-dir", "r", "train", "--manifest", "r/split/manifest.jsonl", "--folds",
            "r/split/folds.json", "--fold", "0", "--epochs", "2", "--batch-size", "4", "--learning-rate", "1e308",
        ],
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn tampered_split_fails_the_audit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d);
    let mut folds = json(&d.join("r/split/folds.json"));
    let moved = folds["folds"][0]["val_patients"][0].clone();
    folds["folds"][1]["val_patients"].as_array_mut().unwrap().push(moved);
    fs::write(d.join("leaky.json"), serde_json::to_string(&folds).unwrap()).unwrap();
    let out = mammoclip(d, &["--out", "a", "evaluate", "--manifest", "r/split/manifest.jsonl", "--audit-split", "leaky.json"]);
    assert_eq!(code(&out), 2);
    assert_eq!(json(&d.join("a/audit.json"))["leakage"], true);
}

#[test]
fn undersampling_targets_shrink_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--out", "g", "generate", "--per-class", "8"]);
    ok(d, &["--out", "s", "split", "--manifest", "g/manifest.jsonl", "--k", "2", "--targets", "6,6,6,5"]);
    let summary = json(&d.join("s/summary.json"));
    let counts: Vec<u64> = summary["class_counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    for (c, t) in counts.iter().zip([6, 6, 6, 5]) {
        assert!(*c >= t && *c <= t + 1, "{counts:?}");
    }
    let out = mammoclip(d, &["--out", "s2", "split", "--manifest", "g/manifest.jsonl", "--targets", "20", "--strict"]);
    assert_eq!(code(&out), 2);
}
