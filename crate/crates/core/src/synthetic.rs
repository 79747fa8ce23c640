//! Seeded synthetic linking dataset for desk-scale end-to-end runs.
//!
//! Every entity gets a unique invented name and a unique colour-grid image.
//! Its mentions repeat the name inside varied filler sentences and carry a
//! noisy copy of the entity image, so the ground truth is separable in both
//! modalities while no mention input is identical to its entity's.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Entity, KnowledgeBase, Mention, Split};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "ren", "tu", "sa", "vo", "zel", "qui", "bra", "dor", "fen", "gal", "hox", "jin", "pem", "rux",
    "tal", "wey", "yor",
];
const GENRES: [&str; 8] = [
    "river", "castle", "painter", "engine", "island", "singer", "forest", "comet",
];
const ORIGINS: [&str; 6] = ["north", "south", "east", "west", "harbor", "valley"];
const FILLER: [&str; 12] = [
    "yesterday",
    "people",
    "watched",
    "reports",
    "said",
    "near",
    "again",
    "during",
    "festival",
    "crowd",
    "photo",
    "local",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_entities: usize,
    /// Mentions per entity: all but the last are training mentions, the last
    /// goes to validation for even entities and to test for odd ones.
    pub mentions_per_entity: usize,
    pub image_size: u32,
    /// Grid cells per image side.
    pub grid: u32,
    /// Amplitude of per-pixel noise added to mention images.
    pub noise: u8,
    /// One training mention in each consecutive run of n training mentions
    /// has no image. Validation and test mentions always carry one, so every
    /// evaluated mention is separable in both modalities.
    pub missing_image_every: Option<usize>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_entities: 64,
            mentions_per_entity: 4,
            image_size: 64,
            grid: 4,
            noise: 24,
            missing_image_every: Some(12),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub root: PathBuf,
    pub entities_path: PathBuf,
    pub mentions_path: PathBuf,
    pub kb: KnowledgeBase,
    pub mentions: Vec<Mention>,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> Vec<Mention> {
        self.mentions.iter().filter(|m| m.split == split).cloned().collect()
    }
}

/// Encoder widths sized for the synthetic dataset.
pub fn synthetic_encoder_config() -> EncoderConfig {
    EncoderConfig {
        text_dim: 64,
        image_dim: 32,
        max_len: 24,
        patch_size: 16,
        image_size: 64,
        ..EncoderConfig::default()
    }
}

fn invent_word(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> String {
    loop {
        let n = rng.gen_range(2..=3);
        let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

fn grid_image(colors: &[[u8; 3]], spec: &SyntheticSpec) -> RgbImage {
    let cell = (spec.image_size / spec.grid).max(1);
    RgbImage::from_fn(spec.image_size, spec.image_size, |x, y| {
        let (cx, cy) = ((x / cell).min(spec.grid - 1), (y / cell).min(spec.grid - 1));
        Rgb(colors[(cy * spec.grid + cx) as usize])
    })
}

fn noisy(img: &RgbImage, amp: u8, rng: &mut ChaCha8Rng) -> RgbImage {
    let amp = amp as i16;
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in p.0.iter_mut() {
            let d = if amp > 0 { rng.gen_range(-amp..=amp) } else { 0 };
            *c = (*c as i16 + d).clamp(0, 255) as u8;
        }
    }
    out
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::Ingest(format!("writing image {}: {e}", path.display())))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("row serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Generates the dataset under `dir`: `entities.jsonl`, `mentions.jsonl` and
/// PNG images in `images/`, with image paths relative to `dir`.
pub fn write_synthetic(dir: &Path, spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    if spec.num_entities == 0 || spec.mentions_per_entity < 2 || spec.grid == 0 || spec.image_size < spec.grid {
        return Err(Error::InvalidArgument(format!("unusable synthetic spec {spec:?}")));
    }
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(format!("creating {}", images.display()), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken = HashSet::new();
    let cells = (spec.grid * spec.grid) as usize;

    let mut entities = Vec::with_capacity(spec.num_entities);
    let mut grids = Vec::with_capacity(spec.num_entities);
    for i in 0..spec.num_entities {
        let name = format!(
            "{} {}",
            invent_word(&mut rng, &mut taken),
            invent_word(&mut rng, &mut taken)
        );
        let colors: Vec<[u8; 3]> = (0..cells).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let img = grid_image(&colors, spec);
        let rel = format!("images/entity_{i:04}.png");
        save_png(&img, &dir.join(&rel))?;
        entities.push(Entity {
            id: format!("E{i:04}"),
            name,
            attributes: vec![
                format!("kind {}", GENRES.choose(&mut rng).unwrap()),
                format!("from the {}", ORIGINS.choose(&mut rng).unwrap()),
            ],
            image_refs: vec![rel],
            description: Some(format!("synthetic entity number {i}")),
        });
        grids.push(img);
    }

    let mut mentions = Vec::with_capacity(spec.num_entities * spec.mentions_per_entity);
    let mut counter = 0usize;
    for (i, e) in entities.iter().enumerate() {
        for k in 0..spec.mentions_per_entity {
            let split = if k + 1 < spec.mentions_per_entity {
                Split::Train
            } else if i % 2 == 0 {
                Split::Valid
            } else {
                Split::Test
            };
            let before: Vec<&str> = (0..rng.gen_range(1..=3))
                .map(|_| *FILLER.choose(&mut rng).unwrap())
                .collect();
            let after: Vec<&str> = (0..rng.gen_range(1..=3))
                .map(|_| *FILLER.choose(&mut rng).unwrap())
                .collect();
            let sentence = format!("{} {} {}.", before.join(" "), e.name, after.join(" "));
            let drop_image = split == Split::Train
                && spec
                    .missing_image_every
                    .is_some_and(|n| n > 0 && counter % n == (counter / n * 5) % n);
            if split == Split::Train {
                counter += 1;
            }
            let image_ref = if drop_image {
                None
            } else {
                let rel = format!("images/mention_{i:04}_{k}.png");
                save_png(&noisy(&grids[i], spec.noise, &mut rng), &dir.join(&rel))?;
                Some(rel)
            };
            mentions.push(Mention {
                id: format!("M{i:04}_{k}"),
                words: e.name.clone(),
                sentence,
                image_ref,
                gt_entity_id: e.id.clone(),
                split,
            });
        }
    }

    let entities_path = dir.join("entities.jsonl");
    let mentions_path = dir.join("mentions.jsonl");
    write_jsonl(&entities_path, &entities)?;
    write_jsonl(&mentions_path, &mentions)?;
    Ok(SyntheticDataset {
        root: dir.to_path_buf(),
        entities_path,
        mentions_path,
        kb: KnowledgeBase::from_entities(entities)?,
        mentions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_entities, load_mentions};

    #[test]
    fn default_shape_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let ds = write_synthetic(dir.path(), &SyntheticSpec::default()).unwrap();
        assert_eq!(ds.kb.len(), 64);
        assert_eq!(ds.mentions.len(), 256);
        assert_eq!(ds.split(Split::Train).len(), 192);
        assert_eq!(ds.split(Split::Valid).len(), 32);
        assert_eq!(ds.split(Split::Test).len(), 32);
        assert_eq!(ds.mentions.iter().filter(|m| m.image_ref.is_none()).count(), 16);
        assert!(ds
            .mentions
            .iter()
            .all(|m| m.image_ref.is_some() || m.split == Split::Train));

        let (kb, report) = load_entities(&ds.entities_path, Some(dir.path())).unwrap();
        assert_eq!(kb, ds.kb);
        assert!(report.missing_images.is_empty());
        let set = load_mentions(&ds.mentions_path, &kb).unwrap();
        assert_eq!(set.mentions, ds.mentions);
        let names: HashSet<&str> = kb.entities().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names.len(), 64);
    }

    #[test]
    fn seeded() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = SyntheticSpec {
            num_entities: 5,
            ..SyntheticSpec::default()
        };
        let da = write_synthetic(a.path(), &spec).unwrap();
        let db = write_synthetic(b.path(), &spec).unwrap();
        assert_eq!(da.mentions, db.mentions);
        assert_eq!(
            fs::read(a.path().join("images/mention_0000_1.png")).unwrap(),
            fs::read(b.path().join("images/mention_0000_1.png")).unwrap()
        );
    }
}
