use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use mimic_core::data::{load_entities, load_mentions, subset_size, KnowledgeBase, Mention, MentionSet, Split};
use mimic_core::encoders::Encoder;
use mimic_core::evaluator::{
    evaluate_split, precompute_entity_features, rank_prepared, CacheStats, EntityFeatureCache, PreparedKb,
};
use mimic_core::trainer::{self, Checkpoint, TrainData, Variant};
use serde_json::{json, Value};

use crate::config::{ResolvedData, RunConfig};
use crate::{CliError, Common};

/// File values, then flag overrides, then validation.
fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(p) = &common.entities {
        cfg.data.entities = Some(p.clone());
    }
    if let Some(p) = &common.mentions {
        cfg.data.mentions = Some(p.clone());
    }
    if let Some(p) = &common.image_root {
        cfg.data.image_root = Some(p.clone());
    }
    if let Some(p) = &common.cache_dir {
        cfg.eval.cache_dir = Some(p.clone());
    }
    Ok(cfg)
}

fn load_data(data: &ResolvedData) -> Result<(KnowledgeBase, Option<MentionSet>, usize), CliError> {
    let (kb, report) = load_entities(&data.entities, Some(&data.image_root))?;
    let mentions = match &data.mentions {
        Some(p) => Some(load_mentions(p, &kb)?),
        None => None,
    };
    Ok((kb, mentions, report.missing_images.len()))
}

pub fn validate(common: &Common) -> Result<Value, CliError> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let data = cfg.data.resolve(false)?;
    let (kb, report) = load_entities(&data.entities, Some(&data.image_root))?;
    let mut out = json!({
        "entities": kb.len(),
        "missing_entity_images": report.missing_images,
    });
    if let Some(p) = &data.mentions {
        let set = load_mentions(p, &kb)?;
        let train = set.count(Split::Train);
        let missing = set
            .mentions
            .iter()
            .filter_map(|m| m.image_ref.as_deref())
            .filter(|r| !data.image_root.join(r).is_file())
            .count();
        out["mentions"] = json!({
            "train": train,
            "valid": set.count(Split::Valid),
            "test": set.count(Split::Test),
            "dropped_unknown_entity": set.dropped,
            "without_image": set.mentions.iter().filter(|m| m.image_ref.is_none()).count(),
            "unresolved_images": missing,
        });
        if let Some(f) = cfg.train.low_resource_fraction {
            out["low_resource_train"] = json!(subset_size(train, f));
        }
    }
    Ok(out)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Ablation preset: full, no-lt, no-lv, no-lc, no-tglu, no-vdlu, no-cmfu.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Train on this fraction of the training mentions.
    #[arg(long)]
    pub low_resource_fraction: Option<f64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Name the run directory `run_<NAME>` instead of using a timestamp.
    #[arg(long)]
    pub run_name: Option<String>,
}

pub fn train(common: &Common, args: &TrainArgs) -> Result<Value, CliError> {
    let mut cfg = load_config(common)?;
    if let Some(v) = &args.variant {
        v.parse::<Variant>()?.apply(&mut cfg.train);
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.max_steps {
        cfg.train.max_steps = Some(v);
    }
    if let Some(v) = args.low_resource_fraction {
        cfg.train.low_resource_fraction = Some(v);
    }
    if let Some(v) = &args.output_dir {
        cfg.output_dir = v.clone();
    }
    cfg.validate()?;
    let data = cfg.data.resolve(true)?;
    let (kb, mentions, _) = load_data(&data)?;
    let mentions = mentions.expect("mention file resolved");
    let (train_m, valid_m) = (mentions.split(Split::Train), mentions.split(Split::Valid));
    let encoder = Encoder::from_config(&cfg.encoder, Some(data.image_root.clone()))?;
    let outcome = trainer::train(
        &cfg.train,
        &encoder,
        TrainData {
            kb: &kb,
            train: &train_m,
            valid: &valid_m,
        },
        &cfg.output_dir,
        args.run_name.as_deref(),
    )?;
    let mut out = serde_json::to_value(&outcome.best).expect("checkpoint info serializes");
    out["run_dir"] = json!(outcome.run_dir);
    out["train_size"] = json!(outcome.train_size);
    out["history"] = json!(outcome.history);
    Ok(out)
}

struct LoadedModel {
    ckpt: Checkpoint,
    hash: String,
    encoder: Encoder,
    kb: KnowledgeBase,
    cache: EntityFeatureCache,
    stats: CacheStats,
}

fn load_model(
    cfg: &RunConfig,
    data: &ResolvedData,
    checkpoint: &Path,
) -> Result<(LoadedModel, Option<MentionSet>), CliError> {
    let (ckpt, hash) = Checkpoint::load(checkpoint)?;
    let (kb, mentions, _) = load_data(data)?;
    let encoder = Encoder::from_config(&ckpt.config.encoder, Some(data.image_root.clone()))?;
    let cache_dir = cfg
        .eval
        .cache_dir
        .as_ref()
        .map(|d| d.join(&mimic_core::evaluator::cache_key(&hash, &encoder.fingerprint(), &kb)[..16]));
    let (cache, stats) = precompute_entity_features(&kb, &encoder, &hash, cache_dir.as_deref(), cfg.eval.chunk_size)?;
    log::info!(
        "entity features: {} computed, {} reused (checkpoint {})",
        stats.computed,
        stats.reused,
        &hash[..12]
    );
    Ok((
        LoadedModel {
            ckpt,
            hash,
            encoder,
            kb,
            cache,
            stats,
        },
        mentions,
    ))
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// train, valid or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write per-mention ranks (JSONL) to this file.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

pub fn evaluate(common: &Common, args: &EvaluateArgs) -> Result<Value, CliError> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let split: Split = args
        .split
        .parse()
        .map_err(|e: mimic_core::Error| CliError::usage(e.to_string()))?;
    if !args.checkpoint.is_file() {
        return Err(CliError::usage(format!(
            "checkpoint {} does not exist",
            args.checkpoint.display()
        )));
    }
    let data = cfg.data.resolve(true)?;
    let (model, mentions) = load_model(&cfg, &data, &args.checkpoint)?;
    let mentions: Vec<Mention> = mentions.expect("mention file resolved").split(split);
    let units = model.ckpt.config.train.units();
    let prepared = PreparedKb::new(&model.cache, &model.ckpt.weights)?;
    let eval = evaluate_split(
        &mentions,
        &model.encoder,
        &prepared,
        &model.ckpt.weights,
        units,
        &args.checkpoint.display().to_string(),
    )?;
    if let Some(path) = &args.dump {
        let mut text = String::new();
        for r in &eval.records {
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| CliError::runtime("io", format!("writing {}: {e}", path.display())))?;
    }
    log::info!(
        "evaluated {} {} mentions against {} entities (cache {}, {} reused)",
        mentions.len(),
        split.as_str(),
        model.kb.len(),
        &model.hash[..12],
        model.stats.reused
    );
    Ok(serde_json::to_value(&eval.report).expect("report serializes"))
}

#[derive(Debug, Args)]
pub struct LinkArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sentence containing the mention.
    #[arg(long)]
    pub sentence: String,
    /// The mention span itself.
    #[arg(long)]
    pub mention: String,
    /// Optional mention image.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(short = 'k', long, default_value_t = 5)]
    pub k: usize,
}

pub fn link(common: &Common, args: &LinkArgs) -> Result<Value, CliError> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    if args.k == 0 {
        return Err(CliError::usage("-k must be at least 1"));
    }
    if !args.checkpoint.is_file() {
        return Err(CliError::usage(format!(
            "checkpoint {} does not exist",
            args.checkpoint.display()
        )));
    }
    let image = match &args.image {
        Some(p) => Some(
            std::path::absolute(p)
                .map_err(|e| CliError::usage(format!("image path {}: {e}", p.display())))?
                .to_string_lossy()
                .into_owned(),
        ),
        None => None,
    };
    let data = cfg.data.resolve(false)?;
    let (model, _) = load_model(&cfg, &data, &args.checkpoint)?;
    let query = Mention {
        id: "query".into(),
        words: args.mention.clone(),
        sentence: args.sentence.clone(),
        image_ref: image,
        gt_entity_id: String::new(),
        split: Split::Test,
    };
    let bundle = model.encoder.encode_mention(&query)?;
    if model.encoder.image_warnings() > 0 {
        log::warn!("mention image could not be read; using zero pixels");
    }
    let units = model.ckpt.config.train.units();
    let prepared = PreparedKb::new(&model.cache, &model.ckpt.weights)?;
    let ranking = rank_prepared(&bundle, None, &prepared, &model.ckpt.weights, units)?;
    let results: Vec<Value> = ranking
        .entries
        .iter()
        .take(args.k)
        .enumerate()
        .map(|(i, r)| {
            json!({
                "rank": i + 1,
                "id": r.id,
                "name": model.kb.get(&r.id).map(|e| e.name.as_str()),
                "scores": r.scores,
            })
        })
        .collect();
    Ok(json!({
        "mention": args.mention,
        "sentence": args.sentence,
        "checkpoint": args.checkpoint.display().to_string(),
        "results": results,
    }))
}
