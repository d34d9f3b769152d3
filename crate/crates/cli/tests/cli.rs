use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ada_sv::experiment::ExperimentConfig;
use ada_sv::train::{System, TrainState};
use ada_sv_cli::{EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC};
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ada-sv"));
    c.env_remove("ADA_SV_OUT");
    c
}

fn tiny_config(extra: Value) -> Value {
    let mut v = json!({
        "corpus": {
            "n_speakers": 8,
            "utts_per_speaker": 3,
            "held_out": { "mode": "speakers", "speakers": 4, "utts_per_speaker": 3 },
            "noise_bank": { "clips_per_category": 2, "clip_s": 1.0 }
        },
        "train": {
            "steps": 4,
            "batch_speakers": 4,
            "crop_s": 0.5,
            "model": {
                "encoder": {
                    "widths": [4, 8],
                    "time_strides": [1, 2],
                    "freq_strides": [4, 4],
                    "embedding_dim": 16,
                    "attention_hidden": 8
                }
            }
        },
        "eval": { "trials": { "n_target": 20, "n_nontarget": 20 } },
        "seeds": [0, 1]
    });
    merge(&mut v, extra);
    v
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn run(dir: &Path, cfg: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--config")
        .arg(cfg)
        .arg("--threads")
        .arg("0")
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn synth_is_deterministic_and_counts_training_copies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({}));
    ok(&run(dir.path(), &cfg, &["synth"]));
    let manifest = dir.path().join("out/corpus/manifest.txt");
    let first = fs::read(&manifest).unwrap();
    ok(&run(dir.path(), &cfg, &["synth"]));
    assert_eq!(first, fs::read(&manifest).unwrap());

    let text = String::from_utf8(first).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("tr-")).count(), 30 * 10 * 4);
}

#[test]
fn invalid_corpus_is_rejected_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &json!({ "corpus": { "n_speakers": 1 } }));
    let o = run(dir.path(), &cfg, &["synth"]);
    assert_eq!(code(&o), EXIT_CONFIG);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn baseline_with_augmentation_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &tiny_config(json!({ "train_overrides": { "baseline": { "p_aug": 0.6 } } })),
    );
    let o = run(dir.path(), &cfg, &["train", "--system", "baseline"]);
    assert_eq!(code(&o), EXIT_CONFIG);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn train_requires_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(json!({})));
    let o = run(dir.path(), &cfg, &["train", "--system", "da"]);
    assert_eq!(code(&o), EXIT_IO);
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.txt"));
}

#[test]
fn stale_manifest_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(json!({})));
    ok(&run(dir.path(), &cfg, &["synth"]));
    let o = bin()
        .arg("--out")
        .arg(dir.path().join("out"))
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "9", "train", "--system", "da"])
        .output()
        .unwrap();
    assert_eq!(code(&o), EXIT_CONFIG);
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(json!({})));
    ok(&run(dir.path(), &cfg, &["synth"]));
    ok(&run(dir.path(), &cfg, &["train", "--system", "ada", "--runs", "1"]));
    let run_dir = dir.path().join("out/ada/seed_1");
    assert!(run_dir.join("final.ckpt").exists());
    let log = fs::read_to_string(run_dir.join("train.log")).unwrap();
    assert_eq!(log.lines().next(), Some("step l_spk l_adv total"));
    assert_eq!(log.lines().count(), 1 + 4);
    assert!(!dir.path().join("out/ada/seed_0").exists());
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let v = tiny_config(json!({}));
    let cfg = write_config(dir.path(), &v);
    ok(&run(dir.path(), &cfg, &["synth"]));
    ok(&run(dir.path(), &cfg, &["train", "--system", "da", "--steps", "0", "--runs", "0"]));
    let written = fs::read(dir.path().join("out/da/seed_0/final.ckpt")).unwrap();

    let mut exp: ExperimentConfig = serde_json::from_value(v).unwrap();
    exp.train.steps = 0;
    let tcfg = exp.system_config(System::Da, 0, 0).unwrap();
    let speakers = exp.corpus.n_speakers;
    let init = TrainState::new(&tcfg, speakers).unwrap();
    assert_eq!(written, init.to_archive(&tcfg).to_bytes());
}

#[test]
fn non_finite_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &tiny_config(json!({ "train": { "optimizer": { "kind": "sgd", "lr": 1e300, "momentum": 0.0 } } })),
    );
    ok(&run(dir.path(), &cfg, &["synth"]));
    let o = run(dir.path(), &cfg, &["train", "--system", "da", "--runs", "0"]);
    assert_eq!(code(&o), EXIT_NUMERIC, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("step"));
}

#[test]
fn compare_names_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(json!({})));
    ok(&run(dir.path(), &cfg, &["synth"]));
    ok(&run(dir.path(), &cfg, &["train", "--system", "da"]));
    let o = run(dir.path(), &cfg, &["compare"]);
    assert_eq!(code(&o), EXIT_IO);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("baseline/seed_0/final.ckpt") && err.contains("ada/seed_1/final.ckpt"), "{err}");
    assert!(!err.contains("/da/seed_"), "{err}");
}

#[test]
fn compare_reports_every_condition_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(json!({})));
    ok(&run(dir.path(), &cfg, &["synth"]));
    ok(&run(dir.path(), &cfg, &["compare", "--train-missing"]));
    let report = dir.path().join("out/report.json");
    let first = fs::read(&report).unwrap();
    let v: Value = serde_json::from_slice(&first).unwrap();
    let conditions = ["Clean", "Noise", "Music", "Speech", "ALL", "Car", "Cafe"];
    assert_eq!(v["conditions"], json!(conditions));
    for sys in ["baseline", "da", "ada"] {
        for c in conditions {
            assert_eq!(v["mean_eer"][sys][c]["values"].as_array().unwrap().len(), 2, "{sys} {c}");
        }
        assert_eq!(v["probe_accuracy"][sys]["values"].as_array().unwrap().len(), 2);
    }
    let md = fs::read_to_string(dir.path().join("out/report.md")).unwrap();
    assert!(md.contains("| A-DA |") && md.contains("ALL:"));

    ok(&run(dir.path(), &cfg, &["compare"]));
    assert_eq!(first, fs::read(&report).unwrap());
}

#[test]
fn eval_and_probe_write_run_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(json!({ "seeds": [0], "conditions": ["Clean", "Cafe"] })));
    ok(&run(dir.path(), &cfg, &["synth"]));
    ok(&run(dir.path(), &cfg, &["train", "--system", "ada"]));
    ok(&run(dir.path(), &cfg, &["eval", "--system", "ada"]));
    ok(&run(dir.path(), &cfg, &["probe", "--system", "ada"]));
    let run_dir = dir.path().join("out/ada/seed_0");

    let report: Value = serde_json::from_slice(&fs::read(run_dir.join("eval.json")).unwrap()).unwrap();
    let keys: Vec<&String> = report.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["Clean", "Cafe"]);
    assert_eq!(report["Cafe"]["n_trials"], 40);

    let trials = fs::read_to_string(run_dir.join("trials/cafe.txt")).unwrap();
    let scores = fs::read_to_string(run_dir.join("scores/cafe.txt")).unwrap();
    assert_eq!(trials.lines().count(), 40);
    for (t, s) in trials.lines().zip(scores.lines()) {
        let t: Vec<&str> = t.split(' ').collect();
        let s: Vec<&str> = s.split(' ').collect();
        assert_eq!(t[..2], s[..2]);
        assert!(t[2] == "0" || t[2] == "1");
        let score: f64 = s[2].parse().unwrap();
        assert!((-1.0..=1.0).contains(&score));
    }

    let probe: Value = serde_json::from_slice(&fs::read(run_dir.join("probe.json")).unwrap()).unwrap();
    let acc = probe["probe_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn output_directory_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(json!({})));
    let o = bin()
        .env("ADA_SV_OUT", dir.path().join("env-out"))
        .arg("--config")
        .arg(&cfg)
        .arg("synth")
        .output()
        .unwrap();
    ok(&o);
    assert!(dir.path().join("env-out/corpus/manifest.txt").exists());

    let o = bin().arg("--config").arg(&cfg).arg("synth").output().unwrap();
    assert_eq!(code(&o), EXIT_CONFIG);
}

#[test]
fn unknown_system_is_rejected() {
    let o = bin().args(["--out", "/nonexistent", "train", "--system", "xvector"]).output().unwrap();
    assert_eq!(code(&o), EXIT_CONFIG);
}
