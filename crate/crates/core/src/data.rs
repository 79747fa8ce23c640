//! Knowledge-base and mention records, JSONL ingestion, and low-resource
//! training subsets.
//!
//! Entity lines carry `id`, `name`, `attributes`, `images` and `description`;
//! mention lines carry `id`, `mention`, `sentence`, `image`, `entity_id` and
//! `split`. Image paths are relative to an image root directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    /// Relative image paths. Only the first one is encoded.
    #[serde(default, rename = "images")]
    pub image_refs: Vec<String>,
    /// Stored for completeness; the model input never reads it.
    #[serde(default)]
    pub description: Option<String>,
}

impl Entity {
    pub fn primary_image(&self) -> Option<&str> {
        self.image_refs.first().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub id: String,
    #[serde(rename = "mention")]
    pub words: String,
    pub sentence: String,
    #[serde(default, rename = "image")]
    pub image_ref: Option<String>,
    #[serde(rename = "entity_id")]
    pub gt_entity_id: String,
    pub split: Split,
}

/// Immutable, id-indexed entity collection. Insertion order is file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    entities: Vec<Entity>,
    index: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn from_entities(entities: Vec<Entity>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entities.len());
        for (pos, entity) in entities.iter().enumerate() {
            if entity.id.is_empty() {
                return Err(Error::Ingest(format!("entity #{pos} has an empty id")));
            }
            if entity.name.is_empty() {
                return Err(Error::Ingest(format!("entity `{}` has an empty name", entity.id)));
            }
            if index.insert(entity.id.clone(), pos).is_some() {
                return Err(Error::Ingest(format!("duplicate entity id `{}`", entity.id)));
            }
        }
        Ok(Self { entities, index })
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn get(&self, id: &str) -> Option<&Entity> {
        self.index.get(id).map(|&i| &self.entities[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// A usable KB holds at least one entity.
    pub fn validate(&self) -> Result<()> {
        if self.entities.is_empty() {
            return Err(Error::Ingest("knowledge base is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MissingImage {
    pub owner_id: String,
    pub path: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EntityIngestReport {
    pub missing_images: Vec<MissingImage>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MentionSet {
    pub mentions: Vec<Mention>,
    /// Mentions whose ground-truth entity is absent from the KB.
    pub dropped: usize,
}

impl MentionSet {
    pub fn split(&self, split: Split) -> Vec<Mention> {
        self.mentions.iter().filter(|m| m.split == split).cloned().collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.mentions.iter().filter(|m| m.split == split).count()
    }
}

fn parse_jsonl<T>(path: &Path) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de> + Send,
{
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let lines: Vec<(usize, &str)> = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).collect();
    // Parsed in parallel, collected in file order.
    lines
        .par_iter()
        .map(|&(n, line)| {
            serde_json::from_str::<T>(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Loads a KB from entity JSONL. Image references that do not exist under
/// `image_root` are kept and listed in the returned report.
pub fn load_entities(path: &Path, image_root: Option<&Path>) -> Result<(KnowledgeBase, EntityIngestReport)> {
    let entities: Vec<Entity> = parse_jsonl(path)?;
    let kb = KnowledgeBase::from_entities(entities)?;
    let mut report = EntityIngestReport::default();
    if let Some(root) = image_root {
        for entity in kb.entities() {
            for image in &entity.image_refs {
                if !root.join(image).is_file() {
                    report.missing_images.push(MissingImage {
                        owner_id: entity.id.clone(),
                        path: image.clone(),
                    });
                }
            }
        }
    }
    if !report.missing_images.is_empty() {
        log::warn!(
            "{} entity image reference(s) in {} do not resolve",
            report.missing_images.len(),
            path.display()
        );
    }
    Ok((kb, report))
}

/// Loads mentions, dropping (and counting) those whose ground truth is not in `kb`.
pub fn load_mentions(path: &Path, kb: &KnowledgeBase) -> Result<MentionSet> {
    let all: Vec<Mention> = parse_jsonl(path)?;
    let total = all.len();
    let mentions: Vec<Mention> = all.into_iter().filter(|m| kb.get(&m.gt_entity_id).is_some()).collect();
    let dropped = total - mentions.len();
    if dropped > 0 {
        log::warn!(
            "dropped {dropped} mention(s) from {} whose entity is not in the knowledge base",
            path.display()
        );
    }
    Ok(MentionSet { mentions, dropped })
}

/// Number of items kept when sampling `fraction` of `len`.
pub fn subset_size(len: usize, fraction: f64) -> usize {
    // Absorbs representation error such as 0.29 * 100 = 28.999999999999996.
    ((fraction * len as f64) + 1e-9).floor() as usize
}

/// Seeded uniform sample without replacement of `floor(fraction * len)`
/// training mentions. Shuffles with the seed, then takes a prefix.
pub fn subset_training(mentions: &[Mention], fraction: f64, seed: u64) -> Result<Vec<Mention>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subset fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if let Some(m) = mentions.iter().find(|m| m.split != Split::Train) {
        return Err(Error::InvalidArgument(format!(
            "mention `{}` is in split `{}`; only training mentions may be subsampled",
            m.id,
            m.split.as_str()
        )));
    }
    let take = subset_size(mentions.len(), fraction);
    let mut order: Vec<usize> = (0..mentions.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order[..take].iter().map(|&i| mentions[i].clone()).collect())
}

/// Resolves a dataset path, optionally prefixed by a data root.
pub fn resolve_path(root: Option<&Path>, path: &Path) -> PathBuf {
    match root {
        Some(root) if path.is_relative() => root.join(path),
        _ => path.to_path_buf(),
    }
}
