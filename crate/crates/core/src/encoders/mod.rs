//! Unified text/image inputs and the encoder adapter contract.
//!
//! Mentions and entities go through the same backend instance. A backend maps
//! token ids to per-token hidden states and pixel grids to per-patch hidden
//! states; row 0 of each local matrix is the `[CLS]` state and doubles as the
//! global feature.

pub mod golden;
mod image;
mod tokenizer;
mod toy;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Entity, Mention};
use crate::error::{Error, Result};

pub use self::image::{preprocess_image, IMAGE_MEAN, IMAGE_STD};
pub use self::tokenizer::{HashTokenizer, Tokenizer, CLS_ID, PAD_ID, SEP_ID};
pub use self::toy::ToyBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Toy,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of textual hidden states (d_T).
    pub text_dim: usize,
    /// Width of visual hidden states after the projection layer (d_v).
    pub image_dim: usize,
    pub max_len: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub backend: BackendKind,
    /// Seed for the toy backend's fixed weights.
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            text_dim: 512,
            image_dim: 96,
            max_len: 40,
            patch_size: 32,
            image_size: 224,
            channels: 3,
            vocab_size: 30_522,
            backend: BackendKind::Toy,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("text_dim", self.text_dim),
            ("image_dim", self.image_dim),
            ("max_len", self.max_len),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("channels", self.channels),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "encoder.image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.vocab_size <= tokenizer::FIRST_REGULAR_ID as usize {
            return Err(Error::Config("encoder.vocab_size too small".into()));
        }
        Ok(())
    }

    /// Number of image patches, `H·W / P²`.
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextInput {
    pub token_ids: Vec<u32>,
    /// 0 for `[CLS] first [SEP]`, 1 for `second [SEP]`.
    pub segment_ids: Vec<u8>,
}

impl TextInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    /// C × H × W, normalized.
    pub pixels: Array3<f64>,
    pub is_missing: bool,
}

impl ImageInput {
    pub fn missing(cfg: &EncoderConfig) -> Self {
        Self {
            pixels: Array3::zeros((cfg.channels, cfg.image_size, cfg.image_size)),
            is_missing: true,
        }
    }
}

/// Global + local features of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures {
    pub global: Array1<f64>,
    pub local: Array2<f64>,
}

/// Encoder output for one mention or entity.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// `[CLS]` text state, d_T.
    pub text_global: Array1<f64>,
    /// (l + 1) × d_T, row 0 is `[CLS]`.
    pub text_local: Array2<f64>,
    pub image_global: Array1<f64>,
    /// (n + 1) × d_v, row 0 is `[CLS]`.
    pub image_local: Array2<f64>,
}

impl FeatureBundle {
    pub fn from_parts(text: ModalityFeatures, image: ModalityFeatures) -> Self {
        Self {
            text_global: text.global,
            text_local: text.local,
            image_global: image.global,
            image_local: image.local,
        }
    }

    pub fn text_dim(&self) -> usize {
        self.text_global.len()
    }

    pub fn image_dim(&self) -> usize {
        self.image_global.len()
    }

    pub fn is_finite(&self) -> bool {
        self.text_global.iter().all(|v| v.is_finite())
            && self.text_local.iter().all(|v| v.is_finite())
            && self.image_global.iter().all(|v| v.is_finite())
            && self.image_local.iter().all(|v| v.is_finite())
    }
}

/// A text + vision backbone. Implementations must be pure: identical inputs
/// give identical outputs regardless of batch composition.
pub trait EncoderBackend: Send + Sync {
    fn config(&self) -> &EncoderConfig;
    fn tokenizer(&self) -> &dyn Tokenizer;
    fn encode_text(&self, batch: &[TextInput]) -> Result<Vec<ModalityFeatures>>;
    fn encode_image(&self, batch: &[ImageInput]) -> Result<Vec<ModalityFeatures>>;
    /// Stable identity of the weights, used to key feature caches.
    fn fingerprint(&self) -> String;
}

pub fn build_backend(cfg: &EncoderConfig) -> Result<Box<dyn EncoderBackend>> {
    cfg.validate()?;
    match cfg.backend {
        BackendKind::Toy => Ok(Box::new(ToyBackend::new(cfg.clone()))),
        BackendKind::Pretrained => Err(Error::Config(
            "no pretrained backbone is bundled; implement `EncoderBackend` for your \
             weights and pass it to `Encoder::new`"
                .into(),
        )),
    }
}

fn finish_text_input(tok: &dyn Tokenizer, first: &str, second: &str, max_len: usize) -> TextInput {
    let mut token_ids = vec![tok.cls_id()];
    let mut segment_ids = vec![0u8];
    token_ids.extend(tok.tokenize(first));
    token_ids.push(tok.sep_id());
    segment_ids.resize(token_ids.len(), 0);
    token_ids.extend(tok.tokenize(second));
    token_ids.push(tok.sep_id());
    segment_ids.resize(token_ids.len(), 1);
    token_ids.truncate(max_len);
    segment_ids.truncate(max_len);
    TextInput { token_ids, segment_ids }
}

/// Attributes rendered as `a. b. c.`
pub fn attribute_text(attributes: &[String]) -> String {
    attributes
        .iter()
        .map(|a| format!("{}.", a.trim_end_matches('.')))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `[CLS] name [SEP] attr₁. attr₂. … [SEP]`, right-truncated to `max_len`.
pub fn build_entity_text_input(entity: &Entity, tok: &dyn Tokenizer, cfg: &EncoderConfig) -> TextInput {
    finish_text_input(tok, &entity.name, &attribute_text(&entity.attributes), cfg.max_len)
}

/// `[CLS] words [SEP] sentence [SEP]`, right-truncated to `max_len`.
pub fn build_mention_text_input(mention: &Mention, tok: &dyn Tokenizer, cfg: &EncoderConfig) -> TextInput {
    finish_text_input(tok, &mention.words, &mention.sentence, cfg.max_len)
}

/// Backend plus image store. Shared by mentions and entities.
pub struct Encoder {
    backend: Box<dyn EncoderBackend>,
    image_root: Option<PathBuf>,
    image_warnings: AtomicUsize,
}

impl Encoder {
    pub fn new(backend: Box<dyn EncoderBackend>, image_root: Option<PathBuf>) -> Self {
        Self {
            backend,
            image_root,
            image_warnings: AtomicUsize::new(0),
        }
    }

    pub fn from_config(cfg: &EncoderConfig, image_root: Option<PathBuf>) -> Result<Self> {
        Ok(Self::new(build_backend(cfg)?, image_root))
    }

    pub fn config(&self) -> &EncoderConfig {
        self.backend.config()
    }

    pub fn backend(&self) -> &dyn EncoderBackend {
        self.backend.as_ref()
    }

    pub fn fingerprint(&self) -> String {
        self.backend.fingerprint()
    }

    /// Images that were referenced but could not be decoded.
    pub fn image_warnings(&self) -> usize {
        self.image_warnings.load(Ordering::Relaxed)
    }

    fn image_path(&self, rel: Option<&str>) -> Option<PathBuf> {
        rel.map(|r| match &self.image_root {
            Some(root) => root.join(r),
            None => Path::new(r).to_path_buf(),
        })
    }

    pub fn encode_parts(&self, text: TextInput, image_ref: Option<&str>) -> Result<FeatureBundle> {
        let path = self.image_path(image_ref);
        let image = preprocess_image(path.as_deref(), self.config(), &self.image_warnings);
        let text = self.backend.encode_text(std::slice::from_ref(&text))?.remove(0);
        let image = self.backend.encode_image(std::slice::from_ref(&image))?.remove(0);
        Ok(FeatureBundle::from_parts(text, image))
    }

    pub fn encode_entity(&self, entity: &Entity) -> Result<FeatureBundle> {
        let text = build_entity_text_input(entity, self.backend.tokenizer(), self.config());
        self.encode_parts(text, entity.primary_image())
            .map_err(|e| Error::Encoding(format!("entity `{}`: {e}", entity.id)))
    }

    pub fn encode_mention(&self, mention: &Mention) -> Result<FeatureBundle> {
        let text = build_mention_text_input(mention, self.backend.tokenizer(), self.config());
        self.encode_parts(text, mention.image_ref.as_deref())
            .map_err(|e| Error::Encoding(format!("mention `{}`: {e}", mention.id)))
    }

    pub fn encode_entities(&self, entities: &[Entity]) -> Result<Vec<FeatureBundle>> {
        entities.par_iter().map(|e| self.encode_entity(e)).collect()
    }

    pub fn encode_mentions(&self, mentions: &[Mention]) -> Result<Vec<FeatureBundle>> {
        mentions.par_iter().map(|m| self.encode_mention(m)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> HashTokenizer {
        HashTokenizer::new(30_522)
    }

    fn entity(name: &str, attrs: &[&str]) -> Entity {
        Entity {
            id: "e".into(),
            name: name.into(),
            attributes: attrs.iter().map(|s| s.to_string()).collect(),
            image_refs: vec![],
            description: None,
        }
    }

    fn mention(words: &str, sentence: &str) -> Mention {
        Mention {
            id: "m".into(),
            words: words.into(),
            sentence: sentence.into(),
            image_ref: None,
            gt_entity_id: "e".into(),
            split: crate::data::Split::Train,
        }
    }

    #[test]
    fn entity_template() {
        let cfg = EncoderConfig::default();
        let t = tok();
        let input = build_entity_text_input(&entity("LeBron James", &["basketball player", "male"]), &t, &cfg);
        let expected = t.encode_marked("[CLS] LeBron James [SEP] basketball player. male. [SEP]");
        assert_eq!(input.token_ids, expected);
        assert_eq!(input.token_ids[0], CLS_ID);
        // [CLS] lebron james [SEP] | basketball player . male . [SEP]
        assert_eq!(input.segment_ids, [0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn entity_without_attributes() {
        let cfg = EncoderConfig::default();
        let t = tok();
        let input = build_entity_text_input(&entity("Paris", &[]), &t, &cfg);
        assert_eq!(input.token_ids, t.encode_marked("[CLS] Paris [SEP] [SEP]"));
    }

    #[test]
    fn mention_template() {
        let cfg = EncoderConfig::default();
        let t = tok();
        let input = build_mention_text_input(&mention("Leonardo", "Leonardo finally won an Oscar."), &t, &cfg);
        assert_eq!(
            input.token_ids,
            t.encode_marked("[CLS] Leonardo [SEP] Leonardo finally won an Oscar. [SEP]")
        );
        let empty = build_mention_text_input(&mention("Leonardo", ""), &t, &cfg);
        assert_eq!(empty.token_ids, t.encode_marked("[CLS] Leonardo [SEP] [SEP]"));
    }

    #[test]
    fn long_inputs_truncate_to_max_len() {
        let cfg = EncoderConfig::default();
        let t = tok();
        let attrs: Vec<String> = (0..30).map(|i| format!("attribute{i}")).collect();
        let e = Entity {
            attributes: attrs,
            ..entity("Someone", &[])
        };
        let input = build_entity_text_input(&e, &t, &cfg);
        assert_eq!(input.len(), 40);
        assert_eq!(input.segment_ids.len(), 40);
        let full = t.encode_marked(&format!("[CLS] Someone [SEP] {} [SEP]", attribute_text(&e.attributes)));
        assert_eq!(input.token_ids[..], full[..40]);

        let long_sentence = "word ".repeat(100);
        let m = build_mention_text_input(&mention("x", &long_sentence), &t, &cfg);
        assert_eq!(m.len(), 40);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            patch_size: 30,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = EncoderConfig {
            image_dim: 0,
            ..EncoderConfig::default()
        };
        assert!(zero.validate().is_err());
        assert_eq!(EncoderConfig::default().num_patches(), 49);
    }

    #[test]
    fn pretrained_backend_needs_an_adapter() {
        let cfg = EncoderConfig {
            backend: BackendKind::Pretrained,
            ..EncoderConfig::default()
        };
        assert!(matches!(build_backend(&cfg), Err(Error::Config(_))));
    }
}
