//! Drives the `cca` binary through the synth → concepts → train → gallery
//! → eval pipeline inside one directory, using relative paths so that
//! reports from different directories are comparable byte for byte.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

pub fn cca(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cca"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("cca binary runs")
}

/// Runs `cca` and returns stdout, panicking with stderr on failure.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cca(dir, args);
    assert!(
        out.status.success(),
        "cca {args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 report")
}

pub struct PipelineOutputs {
    pub synth: String,
    pub concepts: String,
    pub train: String,
    pub gallery: String,
    pub eval: String,
}

/// Full pipeline with generator settings `synth` (JSON object, may be
/// empty) and `train` keys merged into the generated training config.
pub fn pipeline(dir: &Path, seed: u64, synth: Value, train: Value) -> PipelineOutputs {
    std::fs::write(dir.join("synth_in.json"), synth.to_string()).unwrap();
    let seed = seed.to_string();
    let synth = ok(dir, &["synth", "--seed", &seed, "--out-dir", "data", "--config", "synth_in.json"]);

    let cfg_path = dir.join("data/train_config.json");
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    for (k, v) in train.as_object().expect("train overrides are an object") {
        cfg[k] = v.clone();
    }
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();

    let concepts = ok(
        dir,
        &[
            "build-concepts",
            "--annotations",
            "data/train.jsonl",
            "--embeddings",
            "data/embeddings.txt",
            "--out",
            "vocab",
        ],
    );
    let train = ok(
        dir,
        &[
            "train",
            "--config",
            "data/train_config.json",
            "--out-model",
            "model.cca",
            "--annotations",
            "data/train.jsonl",
            "--features",
            "data/features",
            "--vocab",
            "vocab",
        ],
    );
    let gallery = ok(
        dir,
        &[
            "gallery",
            "--model",
            "model.cca",
            "--features",
            "data/features",
            "--out",
            "gallery.ccg",
            "--vocab",
            "vocab",
            "--annotations",
            "data/eval.jsonl",
        ],
    );
    let eval = ok(
        dir,
        &[
            "eval",
            "--gallery",
            "gallery.ccg",
            "--model",
            "model.cca",
            "--vocab",
            "vocab",
            "--annotations",
            "data/eval.jsonl",
        ],
    );
    PipelineOutputs {
        synth,
        concepts,
        train,
        gallery,
        eval,
    }
}

pub fn small_synth() -> Value {
    serde_json::json!({"n_train": 40, "n_eval": 10, "n_concepts": 12, "d_v": 8, "embed_dim": 12, "n_clips": 8})
}

pub fn small_train() -> Value {
    serde_json::json!({"epochs": 2, "d_q": 8, "d_ff": 16})
}
