//! Run configuration: one JSON file, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use mimic_core::encoders::EncoderConfig;
use mimic_core::evaluator::DEFAULT_CHUNK_SIZE;
use mimic_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DATA_ROOT_ENV: &str = "MIMIC_DATA_ROOT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub entities: Option<PathBuf>,
    pub mentions: Option<PathBuf>,
    /// Directory image references resolve against; defaults to the
    /// directory holding the entity file.
    pub image_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Where entity feature caches persist; unset keeps them in memory.
    pub cache_dir: Option<PathBuf>,
    pub chunk_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cache_dir: None,
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs"),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.eval.chunk_size == 0 {
            return Err(CliError::usage("eval.chunk_size must be at least 1"));
        }
        Ok(())
    }
}

/// Dataset paths after applying the data-root prefix and checking they exist.
#[derive(Debug, Clone)]
pub struct ResolvedData {
    pub entities: PathBuf,
    pub mentions: Option<PathBuf>,
    pub image_root: PathBuf,
}

fn prefixed(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

impl DataConfig {
    pub fn resolve(&self, need_mentions: bool) -> Result<ResolvedData, CliError> {
        let root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        let root = root.as_deref();
        let entities = self
            .entities
            .as_deref()
            .map(|p| prefixed(root, p))
            .ok_or_else(|| CliError::usage("no entity file given (data.entities or --entities)"))?;
        if !entities.is_file() {
            return Err(CliError::usage(format!(
                "entity file {} does not exist",
                entities.display()
            )));
        }
        let mentions = match self.mentions.as_deref() {
            Some(p) => {
                let p = prefixed(root, p);
                if !p.is_file() {
                    return Err(CliError::usage(format!("mention file {} does not exist", p.display())));
                }
                Some(p)
            }
            None if need_mentions => {
                return Err(CliError::usage("no mention file given (data.mentions or --mentions)"))
            }
            None => None,
        };
        let image_root = match self.image_root.as_deref() {
            Some(p) => {
                let p = prefixed(root, p);
                if !p.is_dir() {
                    return Err(CliError::usage(format!(
                        "image root {} is not a directory",
                        p.display()
                    )));
                }
                p
            }
            None => entities.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        Ok(ResolvedData {
            entities,
            mentions,
            image_root,
        })
    }
}
