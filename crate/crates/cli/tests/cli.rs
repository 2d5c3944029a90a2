use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tablediff::annotations::parse_voc_xml;

const TINY: &str = r#"{
  "data": { "count": 24, "seed": 3 },
  "vae": {
    "images": 16,
    "model": { "widths": [8, 8, 16] },
    "train": { "epochs": 1, "batch_size": 8, "scale_samples": 16 }
  },
  "train": { "samples": 24, "iterations": 4, "batch_size": 4, "checkpoint_every": 2 },
  "sample": { "steps": 5, "count": 4, "batch": 2 },
  "eval": { "reference_count": 8 }
}"#;

struct Run {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.json");
        fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn root(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    fn raw(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_tablediff"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .arg("--run-dir")
            .arg(self.root())
            .env("TD_THREADS", "1")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    /// Runs a subcommand that must succeed and returns its result line.
    fn ok(&self, args: &[&str]) -> Value {
        let out = self.raw(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let stdout = String::from_utf8(out.stdout).unwrap();
        let lines: Vec<&str> = stdout.lines().collect();
        assert_eq!(lines.len(), 1, "{args:?} printed {stdout:?}");
        let v: Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(v["subcommand"], args[0]);
        v
    }

    fn err(&self, args: &[&str]) -> (i32, Value) {
        let out = self.raw(args);
        assert!(!out.status.success(), "{args:?} should fail");
        let stderr = String::from_utf8(out.stderr).unwrap();
        let last = stderr.lines().last().unwrap();
        (out.status.code().unwrap(), serde_json::from_str(last).unwrap())
    }
}

const PIPELINE: &[&[&str]] = &[
    &["gen-data"],
    &["render-masks"],
    &["train-vae", "--seed", "7"],
    &["cache-latents", "--seed", "7"],
    &["train-dit", "--seed", "7"],
    &["sample", "--seed", "7", "--overlay"],
    &["evaluate", "--seed", "7"],
    &["export", "--seed", "7"],
];

/// Every file under `root` keyed by relative path. The wall-clock column
/// of metrics files is dropped.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
                continue;
            }
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let mut bytes = fs::read(&p).unwrap();
            if rel.ends_with("metrics.csv") {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text
                    .lines()
                    .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
                    .collect::<String>()
                    .into_bytes();
            }
            out.insert(rel, bytes);
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn artifact(v: &Value) -> PathBuf {
    PathBuf::from(v["artifact"].as_str().unwrap())
}

#[test]
fn full_pipeline_then_forced_rerun_is_byte_identical() {
    let run = Run::new();
    let mut results = Vec::new();
    for args in PIPELINE {
        let v = run.ok(args);
        assert_eq!(v["status"], "created", "{args:?}: {v}");
        results.push(v);
    }
    let samples = artifact(&results[5]);
    assert_eq!(fs::read_to_string(samples.join("index.jsonl")).unwrap().lines().count(), 4);
    assert!(samples.join("000000.overlay.png").exists());
    let report = &results[6]["details"];
    assert_eq!(report["n_generated"], 4);
    assert!(report["frechet"].as_f64().unwrap() >= 0.0);
    assert_eq!(fs::read_dir(artifact(&results[7]).join("images")).unwrap().count(), 4);

    let again = run.ok(&["train-dit", "--seed", "7"]);
    assert_eq!(again["status"], "up-to-date");

    let before = snapshot(&run.root());
    for args in PIPELINE {
        let mut forced = args.to_vec();
        forced.push("--force");
        run.ok(&forced);
    }
    let after = snapshot(&run.root());
    assert_eq!(before.keys().collect::<Vec<_>>(), after.keys().collect::<Vec<_>>());
    for (k, v) in &before {
        assert!(after[k] == *v, "{k} changed under --force");
    }
}

#[test]
fn one_mask_many_seeds() {
    let run = Run::new();
    for args in &PIPELINE[..5] {
        run.ok(args);
    }
    let data = fs::read_dir(run.root())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("data-"))
        .unwrap();
    let mask = data.join("masks").join("000000.png");
    let mask = mask.to_str().unwrap();
    let v = run.ok(&["sample", "--seed", "7", "--mask", mask, "--seeds", "1,2,3,4", "--overlay"]);
    let dir = artifact(&v);
    let images: Vec<Vec<u8>> = (0..4).map(|i| fs::read(dir.join(format!("{i:06}.png"))).unwrap()).collect();
    for i in 0..4 {
        assert!(dir.join(format!("{i:06}.overlay.png")).exists());
        for j in i + 1..4 {
            assert_ne!(images[i], images[j], "samples {i} and {j} coincide");
        }
    }
    let anns: Vec<_> = (0..4)
        .map(|i| parse_voc_xml(&fs::read(dir.join(format!("{i:06}.xml"))).unwrap()).unwrap().annotation)
        .collect();
    assert!(anns.iter().all(|a| *a == anns[0]));

    let (code, e) = run.err(&["sample", "--seed", "7", "--mask", mask, "--unconditional"]);
    assert_eq!(code, 2, "{e}");
    assert_eq!(e["producer"], "train-dit");
}

#[test]
fn missing_prerequisite_names_its_producer() {
    let run = Run::new();
    let (code, e) = run.err(&["train-vae", "--seed", "1"]);
    assert_eq!(code, 2);
    assert_eq!(e["error"], "missing-artifact");
    assert_eq!(e["producer"], "gen-data");
    run.ok(&["gen-data"]);
    let (_, e) = run.err(&["train-vae", "--seed", "1"]);
    assert_eq!(e["producer"], "render-masks");
    let (_, e) = run.err(&["train-dit", "--seed", "1"]);
    assert_eq!(e["producer"], "cache-latents");
}

#[test]
fn seed_is_mandatory_for_training_and_sampling() {
    let run = Run::new();
    for cmd in ["train-vae", "train-dit", "sample"] {
        let (code, e) = run.err(&[cmd]);
        assert_eq!(code, 1);
        assert!(e["message"].as_str().unwrap().contains("--seed"), "{e}");
    }
}

#[test]
fn echoed_config_reparses_to_itself() {
    let run = Run::new();
    run.ok(&["gen-data"]);
    let echo = run.root().join("config.json");
    let first = fs::read_to_string(&echo).unwrap();
    fs::copy(&echo, &run.config).unwrap();
    let v = run.ok(&["gen-data"]);
    assert_eq!(v["status"], "up-to-date");
    assert_eq!(fs::read_to_string(&echo).unwrap(), first);
}

#[test]
fn bad_configs_are_rejected() {
    let run = Run::new();
    fs::write(&run.config, r#"{ "trian": {} }"#).unwrap();
    let (code, e) = run.err(&["gen-data"]);
    assert_eq!(code, 1);
    assert_eq!(e["error"], "failed");
    fs::write(&run.config, r#"{ "dit": { "preset": "paper-256" } }"#).unwrap();
    let (_, e) = run.err(&["gen-data"]);
    assert!(e["message"].as_str().unwrap().contains("latent size"), "{e}");
}
