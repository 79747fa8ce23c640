//! Deterministic stand-in backbone: hashed token embeddings followed by a
//! fixed random mixing layer for text, per-patch channel means followed by a
//! fixed random projection for images. No trainable state.

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EncoderBackend, EncoderConfig, HashTokenizer, ImageInput, ModalityFeatures, TextInput, Tokenizer};
use crate::error::{Error, Result};

const TAG_TOKEN: u64 = 0x746f_6b65_6e00_0000;
const TAG_POSITION: u64 = 0x706f_7300_0000_0001;
const TAG_MIX: u64 = 0x6d69_7800_0000_0002;
const TAG_IMAGE: u64 = 0x696d_6700_0000_0003;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ tag) ^ index))
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

pub struct ToyBackend {
    cfg: EncoderConfig,
    tokenizer: HashTokenizer,
    positions: Array2<f64>,
    mix_token: Array2<f64>,
    mix_context: Array2<f64>,
    mix_bias: Array1<f64>,
    patch_proj: Array2<f64>,
    patch_pos: Array2<f64>,
    global_proj: Array2<f64>,
    global_bias: Array1<f64>,
}

impl ToyBackend {
    pub fn new(cfg: EncoderConfig) -> Self {
        let d = cfg.text_dim;
        let dv = cfg.image_dim;
        let n = cfg.num_patches();
        let c = cfg.channels;
        let mut mix = rng_for(cfg.seed, TAG_MIX, 0);
        let text_scale = 1.0 / (d as f64).sqrt();
        let mix_token = uniform_matrix(&mut mix, d, d, text_scale);
        let mix_context = uniform_matrix(&mut mix, d, d, text_scale);
        let mix_bias = uniform_matrix(&mut mix, 1, d, 0.1).row(0).to_owned();
        let positions = uniform_matrix(&mut rng_for(cfg.seed, TAG_POSITION, 0), cfg.max_len, d, 0.1);
        let mut img = rng_for(cfg.seed, TAG_IMAGE, 0);
        let patch_proj = uniform_matrix(&mut img, c, dv, 1.0);
        let patch_pos = uniform_matrix(&mut img, n, dv, 0.1);
        let global_proj = uniform_matrix(&mut img, n * c, dv, 1.0 / ((n * c) as f64).sqrt());
        let global_bias = uniform_matrix(&mut img, 1, dv, 0.1).row(0).to_owned();
        Self {
            tokenizer: HashTokenizer::new(cfg.vocab_size),
            cfg,
            positions,
            mix_token,
            mix_context,
            mix_bias,
            patch_proj,
            patch_pos,
            global_proj,
            global_bias,
        }
    }

    fn token_embedding(&self, id: u32) -> Array1<f64> {
        let mut rng = rng_for(self.cfg.seed, TAG_TOKEN, id as u64);
        Array1::from_shape_simple_fn(self.cfg.text_dim, || rng.gen::<f64>() * 2.0 - 1.0)
    }

    fn encode_one_text(&self, input: &TextInput) -> Result<ModalityFeatures> {
        if input.is_empty() || input.len() > self.cfg.max_len {
            return Err(Error::Encoding(format!(
                "text input length {} outside 1..={}",
                input.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&bad) = input.token_ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(Error::Encoding(format!(
                "token id {bad} outside vocabulary of size {}",
                self.cfg.vocab_size
            )));
        }
        let len = input.len();
        let mut x = Array2::zeros((len, self.cfg.text_dim));
        for (i, &id) in input.token_ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&self.token_embedding(id));
            row += &self.positions.row(i);
        }
        let context = x.mean_axis(ndarray::Axis(0)).unwrap().dot(&self.mix_context) + &self.mix_bias;
        let mut local = x.dot(&self.mix_token) + &context;
        local.mapv_inplace(f64::tanh);
        Ok(ModalityFeatures {
            global: local.row(0).to_owned(),
            local,
        })
    }

    fn encode_one_image(&self, input: &ImageInput) -> Result<ModalityFeatures> {
        let (c, h, w) = input.pixels.dim();
        let side = self.cfg.image_size;
        if (c, h, w) != (self.cfg.channels, side, side) {
            return Err(Error::Encoding(format!(
                "image shape {c}x{h}x{w}, expected {}x{side}x{side}",
                self.cfg.channels
            )));
        }
        let p = self.cfg.patch_size;
        let per_side = side / p;
        let n = per_side * per_side;
        let mut means = Array2::zeros((n, c));
        for gy in 0..per_side {
            for gx in 0..per_side {
                let patch = gy * per_side + gx;
                for ch in 0..c {
                    let block = input.pixels.slice(s![ch, gy * p..(gy + 1) * p, gx * p..(gx + 1) * p]);
                    means[[patch, ch]] = block.mean().unwrap();
                }
            }
        }
        let dv = self.cfg.image_dim;
        let mut local = Array2::zeros((n + 1, dv));
        let patches = (means.dot(&self.patch_proj) + &self.patch_pos).mapv(f64::tanh);
        local.slice_mut(s![1.., ..]).assign(&patches);
        let flat = Array1::from_iter(means.iter().copied());
        let global = (flat.dot(&self.global_proj) + &self.global_bias).mapv(f64::tanh);
        local.row_mut(0).assign(&global);
        Ok(ModalityFeatures { global, local })
    }
}

impl EncoderBackend for ToyBackend {
    fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn encode_text(&self, batch: &[TextInput]) -> Result<Vec<ModalityFeatures>> {
        batch.iter().map(|t| self.encode_one_text(t)).collect()
    }

    fn encode_image(&self, batch: &[ImageInput]) -> Result<Vec<ModalityFeatures>> {
        batch.iter().map(|i| self.encode_one_image(i)).collect()
    }

    fn fingerprint(&self) -> String {
        let c = &self.cfg;
        format!(
            "toy-v1:seed={}:dT={}:dv={}:len={}:P={}:side={}:C={}:V={}",
            c.seed, c.text_dim, c.image_dim, c.max_len, c.patch_size, c.image_size, c.channels, c.vocab_size
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn input(ids: &[u32]) -> TextInput {
        TextInput {
            token_ids: ids.to_vec(),
            segment_ids: vec![0; ids.len()],
        }
    }

    #[test]
    fn text_shapes_follow_sequence_length() {
        let backend = ToyBackend::new(EncoderConfig::default());
        let out = backend.encode_text(&[input(&[1, 10, 11, 12, 13, 14])]).unwrap();
        assert_eq!(out[0].local.dim(), (6, 512));
        assert_eq!(out[0].global.len(), 512);
        assert_eq!(out[0].global, out[0].local.row(0));
    }

    #[test]
    fn batch_composition_does_not_leak() {
        let backend = ToyBackend::new(EncoderConfig::default());
        let a = input(&[1, 50, 60, 2]);
        let b = input(&[1, 70, 2]);
        let together = backend.encode_text(&[a.clone(), b, a.clone()]).unwrap();
        let alone = backend.encode_text(&[a]).unwrap();
        assert_eq!(together[0], alone[0]);
        assert_eq!(together[0], together[2]);
    }

    #[test]
    fn out_of_vocab_is_an_error() {
        let backend = ToyBackend::new(EncoderConfig::default());
        assert!(backend.encode_text(&[input(&[1, 40_000])]).is_err());
    }

    #[test]
    fn image_shapes_and_zero_input() {
        let cfg = EncoderConfig::default();
        let backend = ToyBackend::new(cfg.clone());
        let out = backend.encode_image(&[ImageInput::missing(&cfg)]).unwrap();
        assert_eq!(out[0].local.dim(), (50, 96));
        assert_eq!(out[0].global, out[0].local.row(0));
        assert!(out[0].local.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn image_shape_mismatch_is_an_error() {
        let backend = ToyBackend::new(EncoderConfig::default());
        let img = ImageInput {
            pixels: Array3::zeros((3, 100, 100)),
            is_missing: false,
        };
        assert!(backend.encode_image(&[img]).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = ToyBackend::new(EncoderConfig::default());
        let b = ToyBackend::new(EncoderConfig::default());
        let t = input(&[1, 5, 6, 7, 2]);
        assert_eq!(
            a.encode_text(std::slice::from_ref(&t)).unwrap(),
            b.encode_text(std::slice::from_ref(&t)).unwrap()
        );
        let c = ToyBackend::new(EncoderConfig {
            seed: 1,
            ..EncoderConfig::default()
        });
        assert_ne!(
            a.encode_text(std::slice::from_ref(&t)).unwrap(),
            c.encode_text(&[t]).unwrap()
        );
    }
}
