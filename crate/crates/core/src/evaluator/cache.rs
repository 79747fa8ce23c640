//! Precomputed entity features, chunked on disk and keyed by checkpoint.
//!
//! A cache directory holds `manifest.json` plus `chunk_NNNNN.bin` files. Each
//! chunk stores, per entity, a length-prefixed id followed by the four
//! feature tensors in golden-tensor encoding. Chunks already on disk are
//! reused, so an interrupted precompute resumes where it stopped.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::KnowledgeBase;
use crate::encoders::{golden, Encoder, FeatureBundle};
use crate::error::{Error, Result};

pub const DEFAULT_CHUNK_SIZE: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    key: String,
    checkpoint: String,
    encoder: String,
    entities: usize,
    chunk_size: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub computed: usize,
    pub reused: usize,
}

#[derive(Debug, Clone)]
pub struct EntityFeatureCache {
    key: String,
    ids: Vec<String>,
    bundles: Vec<FeatureBundle>,
    index: HashMap<String, usize>,
}

pub fn kb_fingerprint(kb: &KnowledgeBase) -> String {
    let mut h = Sha256::new();
    for e in kb.entities() {
        let record = serde_json::to_string(e).expect("entity serializes");
        h.update((record.len() as u64).to_le_bytes());
        h.update(record.as_bytes());
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Cache identity: checkpoint hash × encoder weights × KB contents.
pub fn cache_key(checkpoint_hash: &str, encoder_fingerprint: &str, kb: &KnowledgeBase) -> String {
    let mut h = Sha256::new();
    for part in [checkpoint_hash, encoder_fingerprint, &kb_fingerprint(kb)] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex(&h.finalize())
}

fn push_tensor(out: &mut Vec<u8>, t: ArrayD<f64>) {
    let enc = golden::encode(&t);
    out.extend_from_slice(&(enc.len() as u64).to_le_bytes());
    out.extend_from_slice(&enc);
}

fn encode_chunk(ids: &[String], bundles: &[FeatureBundle]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for (id, b) in ids.iter().zip(bundles) {
        out.extend_from_slice(&(id.len() as u64).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        push_tensor(&mut out, b.text_global.clone().into_dyn());
        push_tensor(&mut out, b.text_local.clone().into_dyn());
        push_tensor(&mut out, b.image_global.clone().into_dyn());
        push_tensor(&mut out, b.image_local.clone().into_dyn());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Cache("truncated chunk file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }

    fn tensor(&mut self) -> Result<ArrayD<f64>> {
        let len = self.u64()?;
        golden::decode(self.take(len)?)
    }
}

fn decode_chunk(bytes: &[u8]) -> Result<Vec<(String, FeatureBundle)>> {
    let mut r = Reader { bytes, pos: 0 };
    let count = r.u64()?;
    let mut out = Vec::with_capacity(count);
    let bad = |e: ndarray::ShapeError| Error::Cache(format!("bad tensor rank: {e}"));
    for _ in 0..count {
        let len = r.u64()?;
        let id = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Cache(e.to_string()))?;
        let text_global: Array1<f64> = r.tensor()?.into_dimensionality::<Ix1>().map_err(bad)?;
        let text_local: Array2<f64> = r.tensor()?.into_dimensionality::<Ix2>().map_err(bad)?;
        let image_global: Array1<f64> = r.tensor()?.into_dimensionality::<Ix1>().map_err(bad)?;
        let image_local: Array2<f64> = r.tensor()?.into_dimensionality::<Ix2>().map_err(bad)?;
        out.push((
            id,
            FeatureBundle {
                text_global,
                text_local,
                image_global,
                image_local,
            },
        ));
    }
    if r.pos != bytes.len() {
        return Err(Error::Cache("trailing bytes in chunk file".into()));
    }
    Ok(out)
}

fn chunk_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("chunk_{i:05}.bin"))
}

impl EntityFeatureCache {
    fn from_parts(key: String, ids: Vec<String>, bundles: Vec<FeatureBundle>) -> Self {
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Self {
            key,
            ids,
            bundles,
            index,
        }
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn bundles(&self) -> &[FeatureBundle] {
        &self.bundles
    }

    pub fn get(&self, id: &str) -> Result<&FeatureBundle> {
        self.index
            .get(id)
            .map(|&i| &self.bundles[i])
            .ok_or_else(|| Error::Cache(format!("no cached features for entity `{id}`")))
    }

    /// Fails unless the cache was built for `expected_key`.
    pub fn ensure_key(&self, expected_key: &str) -> Result<()> {
        if self.key != expected_key {
            return Err(Error::Cache(format!(
                "stale cache: built for {}, expected {}",
                short(&self.key),
                short(expected_key)
            )));
        }
        Ok(())
    }

    /// Loads a complete cache from `dir`, rejecting one built for another key.
    pub fn load(dir: &Path, expected_key: &str) -> Result<Self> {
        let manifest = read_manifest(dir)?.ok_or_else(|| Error::Cache(format!("no manifest in {}", dir.display())))?;
        if manifest.key != expected_key {
            return Err(Error::Cache(format!(
                "stale cache in {}: built for {}, expected {}",
                dir.display(),
                short(&manifest.key),
                short(expected_key)
            )));
        }
        let chunks = manifest.entities.div_ceil(manifest.chunk_size.max(1));
        let mut ids = Vec::with_capacity(manifest.entities);
        let mut bundles = Vec::with_capacity(manifest.entities);
        for i in 0..chunks {
            let path = chunk_path(dir, i);
            let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            for (id, b) in decode_chunk(&bytes)? {
                ids.push(id);
                bundles.push(b);
            }
        }
        if ids.len() != manifest.entities {
            return Err(Error::Cache("cache is incomplete".into()));
        }
        Ok(Self::from_parts(manifest.key, ids, bundles))
    }
}

fn short(key: &str) -> &str {
    &key[..key.len().min(12)]
}

fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::json(format!("parsing {}", path.display()), e))
}

/// Encodes every KB entity once for `checkpoint_hash`. With `dir`, chunks are
/// persisted and chunks already present are reused instead of recomputed.
pub fn precompute_entity_features(
    kb: &KnowledgeBase,
    encoder: &Encoder,
    checkpoint_hash: &str,
    dir: Option<&Path>,
    chunk_size: usize,
) -> Result<(EntityFeatureCache, CacheStats)> {
    kb.validate()?;
    let chunk_size = chunk_size.max(1);
    let key = cache_key(checkpoint_hash, &encoder.fingerprint(), kb);
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let manifest = Manifest {
            key: key.clone(),
            checkpoint: checkpoint_hash.to_string(),
            encoder: encoder.fingerprint(),
            entities: kb.len(),
            chunk_size,
        };
        match read_manifest(dir)? {
            Some(existing) if existing != manifest => {
                return Err(Error::Cache(format!(
                    "{} holds a cache for {}, refusing to mix with {}",
                    dir.display(),
                    short(&existing.key),
                    short(&key)
                )))
            }
            Some(_) => {}
            None => {
                let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
                let path = dir.join("manifest.json");
                fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            }
        }
    }

    let mut stats = CacheStats::default();
    let mut ids = Vec::with_capacity(kb.len());
    let mut bundles = Vec::with_capacity(kb.len());
    for (i, chunk) in kb.entities().chunks(chunk_size).enumerate() {
        let chunk_ids: Vec<String> = chunk.iter().map(|e| e.id.clone()).collect();
        if let Some(dir) = dir {
            let path = chunk_path(dir, i);
            if let Ok(bytes) = fs::read(&path) {
                match decode_chunk(&bytes) {
                    Ok(entries) if entries.iter().map(|(id, _)| id).eq(chunk_ids.iter()) => {
                        stats.reused += entries.len();
                        for (id, b) in entries {
                            ids.push(id);
                            bundles.push(b);
                        }
                        continue;
                    }
                    _ => log::warn!("recomputing unreadable cache chunk {}", path.display()),
                }
            }
        }
        let encoded = encoder.encode_entities(chunk)?;
        if let Some(dir) = dir {
            let path = chunk_path(dir, i);
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, encode_chunk(&chunk_ids, &encoded))
                .and_then(|_| fs::rename(&tmp, &path))
                .map_err(|e| {
                    Error::io(
                        format!("writing cache chunk {} (entities {}..)", path.display(), chunk_ids[0]),
                        e,
                    )
                })?;
        }
        stats.computed += encoded.len();
        ids.extend(chunk_ids);
        bundles.extend(encoded);
    }
    Ok((EntityFeatureCache::from_parts(key, ids, bundles), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Entity;
    use crate::encoders::EncoderConfig;

    fn tiny_encoder() -> Encoder {
        let cfg = EncoderConfig {
            text_dim: 8,
            image_dim: 4,
            max_len: 12,
            patch_size: 8,
            image_size: 16,
            ..EncoderConfig::default()
        };
        Encoder::from_config(&cfg, None).unwrap()
    }

    fn kb(n: usize) -> KnowledgeBase {
        KnowledgeBase::from_entities(
            (0..n)
                .map(|i| Entity {
                    id: format!("Q{i}"),
                    name: format!("entity number {i}"),
                    attributes: vec!["thing".into()],
                    image_refs: vec![],
                    description: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn in_memory_cache_matches_direct_encoding() {
        let enc = tiny_encoder();
        let kb = kb(2);
        let (cache, stats) = precompute_entity_features(&kb, &enc, "ck", None, 16).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(stats.computed, 2);
        for e in kb.entities() {
            assert_eq!(cache.get(&e.id).unwrap(), &enc.encode_entity(e).unwrap());
        }
        assert!(cache.get("missing").is_err());
    }

    #[test]
    fn rerun_reuses_chunks_and_load_checks_key() {
        let enc = tiny_encoder();
        let kb = kb(5);
        let dir = tempfile::tempdir().unwrap();
        let (first, s1) = precompute_entity_features(&kb, &enc, "ck", Some(dir.path()), 2).unwrap();
        assert_eq!(s1, CacheStats { computed: 5, reused: 0 });
        let (second, s2) = precompute_entity_features(&kb, &enc, "ck", Some(dir.path()), 2).unwrap();
        assert_eq!(s2, CacheStats { computed: 0, reused: 5 });
        assert_eq!(first.bundles(), second.bundles());

        let loaded = EntityFeatureCache::load(dir.path(), first.key()).unwrap();
        assert_eq!(loaded.bundles(), first.bundles());
        assert!(EntityFeatureCache::load(dir.path(), "other").is_err());
        assert!(precompute_entity_features(&kb, &enc, "other-ck", Some(dir.path()), 2).is_err());
    }

    #[test]
    fn interrupted_precompute_resumes() {
        let enc = tiny_encoder();
        let kb = kb(5);
        let dir = tempfile::tempdir().unwrap();
        precompute_entity_features(&kb, &enc, "ck", Some(dir.path()), 2).unwrap();
        fs::remove_file(chunk_path(dir.path(), 1)).unwrap();
        let (_, stats) = precompute_entity_features(&kb, &enc, "ck", Some(dir.path()), 2).unwrap();
        assert_eq!(stats, CacheStats { computed: 2, reused: 3 });
    }

    #[test]
    fn key_depends_on_checkpoint() {
        let kb = kb(2);
        assert_ne!(cache_key("a", "enc", &kb), cache_key("b", "enc", &kb));
        assert_eq!(cache_key("a", "enc", &kb), cache_key("a", "enc", &kb));
    }
}
