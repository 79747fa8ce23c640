use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use image::imageops::FilterType;
use ndarray::Array3;

use super::{EncoderConfig, ImageInput};

/// Per-channel normalization constants of the contrastive vision checkpoint.
pub const IMAGE_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const IMAGE_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Decodes, rescales to `image_size²` and normalizes an image. Absent or
/// unreadable images become an all-zero grid flagged `is_missing`; unreadable
/// ones also bump `warnings`.
pub fn preprocess_image(path: Option<&Path>, cfg: &EncoderConfig, warnings: &AtomicUsize) -> ImageInput {
    let Some(path) = path else {
        return ImageInput::missing(cfg);
    };
    let decoded = match image::open(path) {
        Ok(img) => img,
        Err(err) => {
            warnings.fetch_add(1, Ordering::Relaxed);
            log::warn!("treating unreadable image {} as missing: {err}", path.display());
            return ImageInput::missing(cfg);
        }
    };
    let side = cfg.image_size as u32;
    let rgb = decoded.resize_exact(side, side, FilterType::Triangle).to_rgb8();
    let mut pixels = Array3::zeros((cfg.channels, cfg.image_size, cfg.image_size));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..cfg.channels {
            let raw = px.0[c % 3] as f64 / 255.0;
            let k = c % 3;
            pixels[[c, y as usize, x as usize]] = (raw - IMAGE_MEAN[k]) / IMAGE_STD[k];
        }
    }
    ImageInput {
        pixels,
        is_missing: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_reference_is_zero_and_missing() {
        let w = AtomicUsize::new(0);
        let img = preprocess_image(None, &EncoderConfig::default(), &w);
        assert!(img.is_missing);
        assert_eq!(img.pixels.dim(), (3, 224, 224));
        assert!(img.pixels.iter().all(|&v| v == 0.0));
        assert_eq!(w.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn corrupt_file_degrades_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"definitely not a png").unwrap();
        let w = AtomicUsize::new(0);
        let img = preprocess_image(Some(&path), &EncoderConfig::default(), &w);
        assert!(img.is_missing);
        assert!(img.pixels.iter().all(|&v| v == 0.0));
        assert_eq!(w.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn valid_image_is_rescaled() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ok.png");
        image::RgbImage::from_pixel(17, 9, image::Rgb([255, 0, 128]))
            .save(&path)
            .unwrap();
        let w = AtomicUsize::new(0);
        let img = preprocess_image(Some(&path), &EncoderConfig::default(), &w);
        assert!(!img.is_missing);
        assert_eq!(img.pixels.dim(), (3, 224, 224));
        let red = (1.0 - IMAGE_MEAN[0]) / IMAGE_STD[0];
        assert!((img.pixels[[0, 100, 100]] - red).abs() < 1e-12);
    }
}
