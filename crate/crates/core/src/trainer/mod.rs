//! Seeded mini-batch training with in-batch negatives, per-epoch validation
//! and best-MRR checkpoint selection.

mod checkpoint;
mod optim;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{subset_training, KnowledgeBase, Mention};
use crate::encoders::{BackendKind, Encoder, FeatureBundle};
use crate::error::{Error, Result};
use crate::evaluator::{mrr_of_bundles, PreparedKb};
use crate::interaction::{
    pairwise_backward, pairwise_score_matrix, InteractionDims, InteractionWeights, ScoreMatrices, UnitMask,
};
use crate::objective::{objective_with_grads, LossBreakdown, LossTerms};

pub use self::checkpoint::{sha256_hex, Checkpoint, ModelConfig, CHECKPOINT_FORMAT};
pub use self::optim::{clip_grad_norm, AdamW};

/// Offset mixed into the seed for batch shuffling, so it draws a stream
/// independent of weight initialisation.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub use_tglu: bool,
    pub use_vdlu: bool,
    pub use_cmfu: bool,
    pub use_l_t: bool,
    pub use_l_v: bool,
    pub use_l_c: bool,
    /// Attention width inside TGLU (d_t).
    pub tglu_dim: usize,
    /// Fusion width inside CMFU (d_c).
    pub cmfu_dim: usize,
    pub temperature: f64,
    /// Global gradient-norm ceiling; unset means no clipping.
    pub grad_clip: Option<f64>,
    /// Stop after this many optimizer steps, mid-epoch if needed.
    pub max_steps: Option<usize>,
    /// Train on a seeded random fraction of the training mentions.
    pub low_resource_fraction: Option<f64>,
    pub freeze_encoders: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            learning_rate: 1e-5,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            use_tglu: true,
            use_vdlu: true,
            use_cmfu: true,
            use_l_t: true,
            use_l_v: true,
            use_l_c: true,
            tglu_dim: 96,
            cmfu_dim: 96,
            temperature: 1.0,
            grad_clip: None,
            max_steps: None,
            low_resource_fraction: None,
            freeze_encoders: true,
        }
    }
}

impl TrainConfig {
    pub fn units(&self) -> UnitMask {
        UnitMask {
            tglu: self.use_tglu,
            vdlu: self.use_vdlu,
            cmfu: self.use_cmfu,
        }
    }

    pub fn loss_terms(&self) -> LossTerms {
        LossTerms {
            l_t: self.use_l_t,
            l_v: self.use_l_v,
            l_c: self.use_l_c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.units().validate()?;
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1".into());
        }
        if let Some(f) = self.low_resource_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("low_resource_fraction must lie in (0, 1], got {f}"));
            }
        }
        if self.tglu_dim == 0 || self.cmfu_dim == 0 {
            return bad("tglu_dim and cmfu_dim must be positive".into());
        }
        Ok(())
    }
}

/// The full model and the six ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoLt,
    NoLv,
    NoLc,
    NoTglu,
    NoVdlu,
    NoCmfu,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoLt,
        Variant::NoLv,
        Variant::NoLc,
        Variant::NoTglu,
        Variant::NoVdlu,
        Variant::NoCmfu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLt => "no-lt",
            Variant::NoLv => "no-lv",
            Variant::NoLc => "no-lc",
            Variant::NoTglu => "no-tglu",
            Variant::NoVdlu => "no-vdlu",
            Variant::NoCmfu => "no-cmfu",
        }
    }

    /// Row label as printed in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "MIMIC",
            Variant::NoLt => "w/o L_T",
            Variant::NoLv => "w/o L_V",
            Variant::NoLc => "w/o L_C",
            Variant::NoTglu => "w/o TGLU + L_T",
            Variant::NoVdlu => "w/o VDLU + L_V",
            Variant::NoCmfu => "w/o CMFU + L_C",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        cfg.use_tglu = true;
        cfg.use_vdlu = true;
        cfg.use_cmfu = true;
        cfg.use_l_t = true;
        cfg.use_l_v = true;
        cfg.use_l_c = true;
        match self {
            Variant::Full => {}
            Variant::NoLt => cfg.use_l_t = false,
            Variant::NoLv => cfg.use_l_v = false,
            Variant::NoLc => cfg.use_l_c = false,
            Variant::NoTglu => (cfg.use_tglu, cfg.use_l_t) = (false, false),
            Variant::NoVdlu => (cfg.use_vdlu, cfg.use_l_v) = (false, false),
            Variant::NoCmfu => (cfg.use_cmfu, cfg.use_l_c) = (false, false),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

/// One mini-batch: its mentions, the ground-truth entity of each mention
/// (the in-batch candidates) and each mention's target column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub mentions: Vec<usize>,
    pub entities: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Builds a batch from `mentions` (indices into `gt_positions`). Candidate
/// column i is mention i's ground truth, so targets lie on the diagonal.
/// Two mentions sharing a ground truth keep separate columns; each acts as
/// a negative for the other.
pub fn build_batch(mentions: &[usize], gt_positions: &[usize]) -> Batch {
    Batch {
        mentions: mentions.to_vec(),
        entities: mentions.iter().map(|&m| gt_positions[m]).collect(),
        targets: (0..mentions.len()).collect(),
    }
}

/// Per-epoch batch schedule: a seeded shuffle of all mentions cut into
/// consecutive batches (the last may be short).
pub struct BatchSchedule {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    batch_size: usize,
}

impl BatchSchedule {
    pub fn new(num_mentions: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM),
            order: (0..num_mentions).collect(),
            batch_size: batch_size.max(1),
        }
    }

    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Weights plus optimizer state; one optimization stream.
pub struct Trainer {
    cfg: TrainConfig,
    weights: InteractionWeights,
    opt: AdamW,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, dims: InteractionDims) -> Result<Self> {
        cfg.validate()?;
        dims.validate()?;
        let weights = InteractionWeights::init(dims, cfg.seed);
        Ok(Self::with_weights(cfg, weights))
    }

    pub fn with_weights(cfg: &TrainConfig, weights: InteractionWeights) -> Self {
        let opt = AdamW::new(
            weights.num_params(),
            cfg.learning_rate,
            cfg.betas,
            cfg.adam_eps,
            cfg.weight_decay,
        );
        Self {
            cfg: cfg.clone(),
            weights,
            opt,
        }
    }

    pub fn weights(&self) -> &InteractionWeights {
        &self.weights
    }

    pub fn into_weights(self) -> InteractionWeights {
        self.weights
    }

    pub fn steps_taken(&self) -> u64 {
        self.opt.steps_taken()
    }

    /// Loss of a batch under the current weights, without updating them.
    pub fn batch_loss(&self, ms: &[&FeatureBundle], es: &[&FeatureBundle], targets: &[usize]) -> Result<LossBreakdown> {
        let units = self.cfg.units();
        let mats = pairwise_score_matrix(ms, es, &self.weights, units)?;
        Ok(objective_with_grads(&mats, targets, units, self.cfg.loss_terms(), self.cfg.temperature)?.0)
    }

    /// Loss, score matrices and weight gradient of a batch.
    pub fn loss_and_grad(
        &self,
        ms: &[&FeatureBundle],
        es: &[&FeatureBundle],
        targets: &[usize],
    ) -> Result<(LossBreakdown, ScoreMatrices, InteractionWeights)> {
        let units = self.cfg.units();
        let mats = pairwise_score_matrix(ms, es, &self.weights, units)?;
        let (loss, dscores) = objective_with_grads(&mats, targets, units, self.cfg.loss_terms(), self.cfg.temperature)?;
        let grads = pairwise_backward(ms, es, &self.weights, units, &dscores)?;
        Ok((loss, mats, grads.weights))
    }

    /// One AdamW update; returns the loss measured before the update.
    pub fn step(&mut self, ms: &[&FeatureBundle], es: &[&FeatureBundle], targets: &[usize]) -> Result<LossBreakdown> {
        let (loss, _, grad) = self.loss_and_grad(ms, es, targets)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", loss.total)));
        }
        let mut g = grad.flatten();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
        }
        if let Some(c) = self.cfg.grad_clip {
            clip_grad_norm(&mut g, c);
        }
        let mut p = self.weights.flatten();
        self.opt.step(&mut p, &g)?;
        self.weights.assign_flat(&p)?;
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    pub val_mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub path: PathBuf,
    pub epoch: usize,
    pub val_mrr: f64,
    pub config: ModelConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: CheckpointInfo,
    pub run_dir: PathBuf,
    pub history: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<LossBreakdown>,
    /// Number of training mentions actually used.
    pub train_size: usize,
}

/// Epoch with the highest MRR; ties go to the earliest epoch.
pub fn select_best_checkpoint(history: &[(usize, f64)]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(epoch, mrr) in history {
        if mrr.is_nan() {
            return Err(Error::NonFinite(format!("validation MRR of epoch {epoch} is NaN")));
        }
        match best {
            Some((e, m)) if mrr < m || (mrr == m && epoch >= e) => {}
            _ => best = Some((epoch, mrr)),
        }
    }
    best.map(|(e, _)| e)
        .ok_or_else(|| Error::InvalidArgument("empty training history".into()))
}

pub struct TrainData<'a> {
    pub kb: &'a KnowledgeBase,
    pub train: &'a [Mention],
    pub valid: &'a [Mention],
}

#[derive(Serialize)]
struct MatrixStats {
    min: f64,
    max: f64,
    mean: f64,
    non_finite: usize,
}

impl MatrixStats {
    fn of(m: &Array2<f64>) -> Self {
        let finite: Vec<f64> = m.iter().copied().filter(|v| v.is_finite()).collect();
        let n = finite.len().max(1) as f64;
        Self {
            min: finite.iter().copied().fold(f64::INFINITY, f64::min),
            max: finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: finite.iter().sum::<f64>() / n,
            non_finite: m.len() - finite.len(),
        }
    }
}

fn gt_positions(kb: &KnowledgeBase, mentions: &[Mention]) -> Result<Vec<usize>> {
    mentions
        .iter()
        .map(|m| {
            kb.position(&m.gt_entity_id).ok_or_else(|| {
                Error::Ingest(format!(
                    "mention `{}` links to unknown entity `{}`",
                    m.id, m.gt_entity_id
                ))
            })
        })
        .collect()
}

fn new_run_dir(out_dir: &Path, run_name: Option<&str>) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let base = match run_name {
        Some(n) => format!("run_{n}"),
        None => format!(
            "run_{}",
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        ),
    };
    let mut dir = out_dir.join(&base);
    let mut k = 1;
    while dir.exists() {
        dir = out_dir.join(format!("{base}_{k}"));
        k += 1;
    }
    fs::create_dir(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Trains the interaction layer on frozen encoder features. Writes
/// `config.json`, one `epoch_<n>.ckpt` per epoch and `history.jsonl` into a
/// fresh `run_<name>` directory under `out_dir`, and returns the checkpoint
/// with the best validation MRR.
pub fn train(
    cfg: &TrainConfig,
    encoder: &Encoder,
    data: TrainData<'_>,
    out_dir: &Path,
    run_name: Option<&str>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !cfg.freeze_encoders {
        let reason = match encoder.config().backend {
            BackendKind::Toy => "the toy backend has no trainable encoder weights",
            BackendKind::Pretrained => "no pretrained adapter is linked into this build",
        };
        return Err(Error::Config(format!(
            "freeze_encoders = false is unsupported: {reason}"
        )));
    }
    data.kb.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("no training mentions".into()));
    }
    if data.valid.is_empty() {
        return Err(Error::InvalidArgument(
            "no validation mentions for model selection".into(),
        ));
    }

    let subset;
    let train_mentions = match cfg.low_resource_fraction {
        Some(f) => {
            subset = subset_training(data.train, f, cfg.seed)?;
            if subset.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "fraction {f} of {} training mentions is empty",
                    data.train.len()
                )));
            }
            &subset[..]
        }
        None => data.train,
    };
    let model_config = ModelConfig {
        encoder: encoder.config().clone(),
        train: cfg.clone(),
    };
    let dims = model_config.dims();
    let gt = gt_positions(data.kb, train_mentions)?;
    gt_positions(data.kb, data.valid)?;

    log::info!(
        "encoding {} entities, {} train and {} validation mentions",
        data.kb.len(),
        train_mentions.len(),
        data.valid.len()
    );
    let entity_feats = encoder.encode_entities(data.kb.entities())?;
    let train_feats = encoder.encode_mentions(train_mentions)?;
    let valid_feats: Vec<(FeatureBundle, String)> = encoder
        .encode_mentions(data.valid)?
        .into_iter()
        .zip(data.valid)
        .map(|(b, m)| (b, m.gt_entity_id.clone()))
        .collect();
    let entity_ids: Vec<String> = data.kb.entities().iter().map(|e| e.id.clone()).collect();

    let run_dir = new_run_dir(out_dir, run_name)?;
    write_json(&run_dir.join("config.json"), &model_config)?;
    let history_path = run_dir.join("history.jsonl");
    let mut history_file =
        File::create(&history_path).map_err(|e| Error::io(format!("creating {}", history_path.display()), e))?;

    let mut trainer = Trainer::new(cfg, dims)?;
    let mut schedule = BatchSchedule::new(train_mentions.len(), cfg.batch_size, cfg.seed);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut ckpt_paths = Vec::new();
    let units = cfg.units();

    'epochs: for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut budget_hit = false;
        for idx in schedule.next_epoch() {
            let batch = build_batch(&idx, &gt);
            let ms: Vec<&FeatureBundle> = batch.mentions.iter().map(|&i| &train_feats[i]).collect();
            let es: Vec<&FeatureBundle> = batch.entities.iter().map(|&j| &entity_feats[j]).collect();
            let loss = match trainer.step(&ms, &es, &batch.targets) {
                Ok(l) => l,
                Err(Error::NonFinite(msg)) => {
                    let path = run_dir.join("diagnostics.json");
                    let mats = pairwise_score_matrix(&ms, &es, trainer.weights(), units).ok();
                    let ids: Vec<&str> = batch.mentions.iter().map(|&i| train_mentions[i].id.as_str()).collect();
                    let diag = serde_json::json!({
                        "epoch": epoch,
                        "step": trainer.steps_taken() + 1,
                        "error": msg,
                        "batch_mention_ids": ids,
                        "weights_finite": trainer.weights().is_finite(),
                        "scores": mats.map(|m| serde_json::json!({
                            "s_t": MatrixStats::of(&m.s_t),
                            "s_v": MatrixStats::of(&m.s_v),
                            "s_c": MatrixStats::of(&m.s_c),
                            "s": MatrixStats::of(&m.s),
                        })),
                    });
                    write_json(&path, &diag)?;
                    return Err(Error::NonFinite(format!(
                        "{msg} at epoch {epoch}; diagnostics written to {}",
                        path.display()
                    )));
                }
                Err(e) => return Err(e),
            };
            epoch_loss += loss.total;
            batches += 1;
            step_losses.push(loss);
            if cfg.max_steps.is_some_and(|m| trainer.steps_taken() as usize >= m) {
                budget_hit = true;
                break;
            }
        }

        let kb_prepared = PreparedKb::from_bundles(&entity_ids, &entity_feats, trainer.weights())?;
        let val_mrr = mrr_of_bundles(&valid_feats, &kb_prepared, trainer.weights(), units)?;
        let record = EpochRecord {
            epoch,
            loss: epoch_loss / batches as f64,
            val_mrr,
        };
        log::info!("epoch {epoch}: loss {:.6}, validation MRR {:.4}", record.loss, val_mrr);

        let ckpt = Checkpoint {
            epoch,
            config: model_config.clone(),
            weights: trainer.weights().clone(),
        };
        let path = run_dir.join(format!("epoch_{epoch}.ckpt"));
        ckpt.save(&path)?;
        ckpt_paths.push(path);
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(history_file, "{line}").map_err(|e| Error::io(format!("writing {}", history_path.display()), e))?;
        history.push(record);
        if budget_hit {
            break 'epochs;
        }
    }

    let pairs: Vec<(usize, f64)> = history.iter().map(|r| (r.epoch, r.val_mrr)).collect();
    let best_epoch = select_best_checkpoint(&pairs)?;
    let best = CheckpointInfo {
        path: ckpt_paths[best_epoch - 1].clone(),
        epoch: best_epoch,
        val_mrr: history[best_epoch - 1].val_mrr,
        config: model_config,
    };
    write_json(&run_dir.join("best.json"), &best)?;
    Ok(TrainOutcome {
        best,
        run_dir,
        history,
        step_losses,
        train_size: train_mentions.len(),
    })
}
