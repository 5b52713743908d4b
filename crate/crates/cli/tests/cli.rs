use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const GEOM: [&str; 6] = ["--frame-height", "16", "--frame-width", "16", "--sequence-length", "3"];

fn sttl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sttl"))
        .current_dir(dir)
        .args(args)
        .env_remove("STTL_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = sttl(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, domain: &str, n: &str, seed: &str, out: &str) {
    let mut args = vec!["gen-data", "--domain", domain, "--n", n, "--seed", seed, "--out", out];
    args.extend(GEOM);
    ok(dir, &args);
}

#[test]
fn gen_data_writes_requested_sequences() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &[
            "gen-data", "--domain", "townA", "--n", "200", "--seed", "1", "--out", "a.sttl",
        ],
    );
    assert!(out.contains("wrote 200 sequences"));
    let ds = sttl_core::synthdata::load_dataset(&dir.path().join("a.sttl")).unwrap();
    assert_eq!(ds.len(), 200);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.sttl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 1);
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "townB", "30", "9", "x.sttl");
    gen(dir.path(), "townB", "30", "9", "y.sttl");
    let x = std::fs::read(dir.path().join("x.sttl")).unwrap();
    let y = std::fs::read(dir.path().join("y.sttl")).unwrap();
    assert_eq!(x, y);
}

#[test]
fn missing_output_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sttl(dir.path(), &["gen-data", "--domain", "townA", "--n", "5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("out"));
}

#[test]
fn invalid_values_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [
        vec![
            "gen-data",
            "--domain",
            "townA",
            "--n",
            "5",
            "--out",
            "a",
            "--collision-ratio",
            "1.5",
        ],
        vec!["gen-data", "--domain", "nowhere", "--n", "5", "--out", "a"],
        vec![
            "gen-data",
            "--domain",
            "townA",
            "--n",
            "5",
            "--out",
            "a",
            "--optimizer",
            "sgd9",
        ],
        vec!["experiment", "nope", "--out-dir", "x"],
    ] {
        let out = sttl(dir.path(), &bad);
        assert_eq!(out.status.code(), Some(2), "{bad:?}");
    }
}

#[test]
fn config_file_is_overridden_by_options() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), "# test\ndomain = townC\nn = 7\nseed = 3\n").unwrap();
    let out = ok(
        dir.path(),
        &["--config", "run.conf", "gen-data", "--n", "4", "--out", "c.sttl"],
    );
    assert!(out.contains("wrote 4 sequences of townC"));
    std::fs::write(dir.path().join("bad.conf"), "colour = blue\n").unwrap();
    let out = sttl(dir.path(), &["--config", "bad.conf", "gen-data", "--out", "c.sttl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_reproduces_final_training_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "townA", "24", "1", "a.sttl");
    gen(d, "townA", "12", "2", "v.sttl");
    ok(
        d,
        &[
            "train-phase1",
            "--data",
            "a.sttl",
            "--validation",
            "v.sttl",
            "--epochs",
            "2",
            "--out",
            "m.ckpt",
        ],
    );
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("m.ckpt.manifest.json")).unwrap()).unwrap();
    let last = manifest["details"]["history"]
        .as_array()
        .unwrap()
        .last()
        .unwrap()
        .clone();
    let validation = last["validation_metric"].as_f64().unwrap();
    ok(
        d,
        &[
            "eval",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "v.sttl",
            "--out",
            "metrics.json",
        ],
    );
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["accuracy"].as_f64().unwrap(), validation);
    assert_eq!(metrics["count"], 12);
}

#[test]
fn eval_on_empty_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "townA", "8", "1", "a.sttl");
    ok(
        d,
        &["train-phase1", "--data", "a.sttl", "--epochs", "1", "--out", "m.ckpt"],
    );
    sttl_core::synthdata::save_dataset(&sttl_core::synthdata::Dataset::new(Vec::new()), &d.join("e.sttl")).unwrap();
    let out = sttl(d, &["eval", "--checkpoint", "m.ckpt", "--data", "e.sttl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn geometry_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "townA", "8", "1", "a.sttl");
    ok(
        d,
        &["train-phase1", "--data", "a.sttl", "--epochs", "1", "--out", "m.ckpt"],
    );
    let out = sttl(
        d,
        &[
            "eval",
            "--checkpoint",
            "m.ckpt",
            "--data",
            "a.sttl",
            "--frame-width",
            "32",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config digest mismatch"));
}

#[test]
fn two_phase_pipeline_with_ablation_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, "townA", "20", "1", "a.sttl");
    gen(d, "townB", "20", "2", "b.sttl");
    ok(
        d,
        &[
            "train-phase1",
            "--data",
            "a.sttl",
            "--epochs",
            "1",
            "--out",
            "p1.ckpt",
            "--bundle",
            "p1.bundle",
        ],
    );
    let out = ok(
        d,
        &[
            "gen-salient",
            "--checkpoint",
            "p1.ckpt",
            "--data",
            "b.sttl",
            "--salient-ratio",
            "0.25",
            "--out",
            "bm.sttl",
        ],
    );
    assert!(out.contains("attached maps to 5 of 20"));
    ok(
        d,
        &[
            "train-phase2",
            "--bundle",
            "p1.bundle",
            "--data",
            "bm.sttl",
            "--epochs",
            "1",
            "--out",
            "full.ckpt",
        ],
    );
    ok(
        d,
        &[
            "train-phase2",
            "--bundle",
            "p1.bundle",
            "--data",
            "b.sttl",
            "--epochs",
            "1",
            "--no-lstm-transfer",
            "--out",
            "nolstm.ckpt",
        ],
    );
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("nolstm.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["details"]["flags"]["transfer_lstm_weights"], false);
    assert_eq!(manifest["details"]["flags"]["transfer_hidden"], false);
    assert_eq!(manifest["details"]["flags"]["transfer_cnn"], true);
    assert_eq!(manifest["details"]["salient_ratio"], 0.0);

    let full: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("full.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(full["details"]["salient_ratio"], 0.25);

    ok(d, &["eval", "--checkpoint", "full.ckpt", "--data", "b.sttl"]);
    let sim = ok(
        d,
        &[
            "similarity",
            "--checkpoint",
            "p1.ckpt",
            "--data",
            "a.sttl",
            "--data-b",
            "b.sttl",
            "--pairs",
            "10",
            "--fid-samples",
            "10",
            "--out",
            "s.json",
        ],
    );
    assert!(sim.contains("townA vs townB"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("s.json")).unwrap()).unwrap();
    let c = report["pairs"][0]["mean_cosine"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&c));
}

#[test]
fn experiment_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(d, &["experiment", "steering", "--scale", "smoke", "--out-dir", "ex"]);
    assert!(out.contains("from-scratch"));
    for f in ["steering.txt", "steering.json", "steering.json.manifest.json"] {
        assert!(d.join("ex").join(f).is_file(), "{f}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("ex/steering.json")).unwrap()).unwrap();
    assert_eq!(report["experiment"], "steering");
}
