#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mimic_cli::config::RunConfig;
use mimic_core::synthetic::{synthetic_encoder_config, write_synthetic, SyntheticDataset, SyntheticSpec};
use mimic_core::trainer::TrainConfig;

/// Scaled-down training settings used on the synthetic fixture.
pub fn synthetic_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 33,
        batch_size: 32,
        learning_rate: 1e-3,
        tglu_dim: 32,
        cmfu_dim: 32,
        max_steps: Some(200),
        ..TrainConfig::default()
    }
}

pub fn dataset(dir: &Path) -> SyntheticDataset {
    write_synthetic(dir, &SyntheticSpec::default()).expect("synthetic dataset")
}

/// Writes a run config pointing at `data` and returns its path.
pub fn write_config(dir: &Path, data: &SyntheticDataset, train: TrainConfig) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.data.entities = Some(data.entities_path.clone());
    cfg.data.mentions = Some(data.mentions_path.clone());
    cfg.output_dir = dir.join("runs");
    cfg.encoder = synthetic_encoder_config();
    cfg.train = train;
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

pub fn mimic(args: &[&str]) -> Output {
    mimic_env(args, &[])
}

pub fn mimic_env(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mimic"));
    cmd.args(args).env_remove("MIMIC_DATA_ROOT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("mimic binary runs")
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}, stderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}
