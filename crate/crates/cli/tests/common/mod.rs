#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use vcc_core::signal::write_wav;
use vcc_core::toy::{toy_waveforms, ToyCorpusConfig};

pub fn vcc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vcc"))
}

/// Runs `vcc --config <cfg> args..` quietly.
pub fn run(cfg: &Path, args: &[&str]) -> Output {
    vcc()
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("vcc runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub fn summary(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or(Value::Null)
}

/// Writes the toy corpus as `<root>/<speaker>/u<NNN>.wav`.
pub fn write_toy_corpus(root: &Path, utterances: usize, frames: usize) -> Vec<PathBuf> {
    let cfg = ToyCorpusConfig { utterances, frames_per_utterance: frames, ..Default::default() };
    let mut out = Vec::new();
    for (spk, waves) in toy_waveforms(&cfg).expect("toy corpus") {
        let d = root.join(&spk);
        std::fs::create_dir_all(&d).unwrap();
        for (i, w) in waves.iter().enumerate() {
            let p = d.join(format!("u{i:03}.wav"));
            write_wav(&p, w).unwrap();
            out.push(p);
        }
    }
    out
}

/// A small but complete pipeline configuration; paths are relative to the
/// config file.
pub fn small_config(stages: Value) -> Value {
    json!({
        "corpus_roots": ["corpus"],
        "cache_dir": "cache",
        "work_dir": "work",
        "seed": 5,
        "analysis": { "mcep_dim": 12 },
        "cyclevae": {
            "latent_dim": 8, "context_window": 2, "encoder_hidden": [32], "decoder_hidden": [32],
            "mcep_dim": 12, "segment_frames": 25, "batch_segments": 2, "learning_rate": 0.003
        },
        "cyclevae_epochs": 3,
        "vocoder": {
            "quantization": 64, "residual_channels": 8, "skip_channels": 8,
            "dilations": [1, 2, 4, 8], "segment_samples": 800, "learning_rate": 0.003
        },
        "stage_plan": { "stages": stages },
        "augmentation": { "targets": ["spkA"], "sources": ["spkB"] },
    })
}

pub fn natural_stage(stage: u8, epochs: usize) -> Value {
    json!({ "stage": stage, "feature_mode": if stage == 1 { "natural" } else { "reconstructed" },
            "speakers": ["spk*"], "max_epochs": epochs })
}

pub fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("vcc.json");
    std::fs::write(&p, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    p
}
