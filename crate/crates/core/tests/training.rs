use std::fs;
use std::path::Path;

use mimic_core::data::Split;
use mimic_core::encoders::Encoder;
use mimic_core::synthetic::{synthetic_encoder_config, write_synthetic, SyntheticDataset, SyntheticSpec};
use mimic_core::trainer::{train, Checkpoint, TrainConfig, TrainData, TrainOutcome, Variant};
use mimic_core::Error;

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 32,
        learning_rate: 1e-3,
        tglu_dim: 16,
        cmfu_dim: 16,
        max_steps: Some(9),
        ..TrainConfig::default()
    }
}

fn run(data: &SyntheticDataset, cfg: &TrainConfig, out: &Path, name: &str) -> Result<TrainOutcome, Error> {
    let encoder = Encoder::from_config(&synthetic_encoder_config(), Some(data.root.clone()))?;
    let (train_m, valid_m) = (data.split(Split::Train), data.split(Split::Valid));
    let data = TrainData {
        kb: &data.kb,
        train: &train_m,
        valid: &valid_m,
    };
    train(cfg, &encoder, data, out, Some(name))
}

fn fixture(dir: &Path) -> SyntheticDataset {
    let spec = SyntheticSpec {
        num_entities: 24,
        ..SyntheticSpec::default()
    };
    write_synthetic(&dir.join("data"), &spec).unwrap()
}

#[test]
fn run_directory_layout_and_budget() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let out = run(&data, &config(), dir.path(), "layout").unwrap();
    // 72 training mentions in batches of 32: 3 steps per epoch, 9 in total.
    assert_eq!(out.step_losses.len(), 9);
    assert_eq!(out.history.len(), 3);
    assert!(out.run_dir.ends_with("run_layout"));
    for f in [
        "config.json",
        "history.jsonl",
        "best.json",
        "epoch_1.ckpt",
        "epoch_3.ckpt",
    ] {
        assert!(out.run_dir.join(f).is_file(), "{f} missing");
    }
    let history = fs::read_to_string(out.run_dir.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let (ckpt, _) = Checkpoint::load(&out.best.path).unwrap();
    assert_eq!(ckpt.epoch, out.best.epoch);
    assert_eq!(ckpt.config.train, config());

    // A second run with the same name gets a fresh directory.
    let again = run(&data, &config(), dir.path(), "layout").unwrap();
    assert!(again.run_dir.ends_with("run_layout_1"));
    assert_eq!(again.step_losses, out.step_losses);
    assert_eq!(
        fs::read(again.run_dir.join("epoch_3.ckpt")).unwrap(),
        fs::read(out.run_dir.join("epoch_3.ckpt")).unwrap()
    );
}

#[test]
fn seeds_and_variants_change_the_result() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let base = run(&data, &config(), dir.path(), "base").unwrap();
    let reseeded = run(&data, &TrainConfig { seed: 1, ..config() }, dir.path(), "seed").unwrap();
    assert_ne!(base.step_losses, reseeded.step_losses);
    let mut cfg = config();
    Variant::NoCmfu.apply(&mut cfg);
    let ablated = run(&data, &cfg, dir.path(), "ablated").unwrap();
    assert!(ablated.step_losses.iter().all(|l| l.l_c == 0.0));
    assert!(base.step_losses.iter().all(|l| l.l_c > 0.0));
    let read = |o: &TrainOutcome| fs::read(o.run_dir.join("epoch_3.ckpt")).unwrap();
    assert_ne!(read(&base), read(&ablated));
}

#[test]
fn divergence_writes_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..config()
    };
    let err = run(&data, &cfg, dir.path(), "diverge").unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let diag = fs::read_to_string(dir.path().join("run_diverge/diagnostics.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&diag).unwrap();
    assert!(v["batch_mention_ids"].as_array().is_some_and(|a| !a.is_empty()), "{v}");
}

#[test]
fn unfrozen_encoders_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture(dir.path());
    let cfg = TrainConfig {
        freeze_encoders: false,
        ..config()
    };
    assert!(matches!(run(&data, &cfg, dir.path(), "x"), Err(Error::Config(_))));
}
