//! Image loading and the augmentation pipeline.
//!
//! Training pipeline: resize to the target square, histogram equalization
//! with probability `hist_eq_prob`, horizontal flip with `hflip_prob`, then
//! a color-jitter block (brightness, contrast, saturation, hue) applied as
//! a whole with probability `jitter_prob`. Evaluation mode resizes and
//! normalizes only and is a pure function of the input.
//!
//! Histogram equalization operates per channel on 8-bit intensities before
//! any float conversion. Jitter factors are sampled uniformly in
//! `[1-s, 1+s]` for brightness/contrast/saturation and in `+-s` of the
//! half-turn hue range (`+-s*180` degrees) for hue. Output pixels are
//! normalized per channel as `(x/255 - mean) / std`; the default constants
//! are the oracle backbone's pretraining statistics.

pub mod synth;

use std::path::Path;

use image::{imageops, RgbImage};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{fl, Scalar};

/// Channel statistics of the default (ImageNet-style) oracle pretraining.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Output edge length; images become `target_size x target_size x 3`.
    pub target_size: usize,
    pub hist_eq_prob: f64,
    pub hflip_prob: f64,
    /// Strength `s` of the jitter block.
    pub jitter_strength: f64,
    /// Probability of applying the whole jitter block.
    pub jitter_prob: f64,
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
    /// Base seed for augmentation streams; the trainer derives one stream
    /// per (step, slot).
    pub rng_seed: u64,
    /// When false, only resize and normalization are applied.
    pub train_mode: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            target_size: 224,
            hist_eq_prob: 0.5,
            hflip_prob: 0.5,
            jitter_strength: 0.3,
            jitter_prob: 0.3,
            normalize_mean: IMAGENET_MEAN,
            normalize_std: IMAGENET_STD,
            rng_seed: 0,
            train_mode: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hist_eq_prob", self.hist_eq_prob),
            ("hflip_prob", self.hflip_prob),
            ("jitter_prob", self.jitter_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        if self.jitter_strength < 0.0 || self.jitter_strength > 1.0 {
            return Err(Error::config(format!(
                "jitter_strength must lie in [0,1], got {}",
                self.jitter_strength
            )));
        }
        if self.target_size < 8 {
            return Err(Error::config("target_size must be at least 8"));
        }
        if self.normalize_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("normalize_std entries must be positive"));
        }
        Ok(())
    }

    /// Copy of this config with all stochastic stages disabled.
    pub fn eval_mode(&self) -> Self {
        AugmentConfig { train_mode: false, ..self.clone() }
    }
}

/// Decodes a PNG or JPEG; failures carry the image locator.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::data(format!("cannot decode image {}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

/// Bilinear resize to a square; identity when already the right size.
pub fn resize_bilinear(img: &RgbImage, size: usize) -> RgbImage {
    if img.width() as usize == size && img.height() as usize == size {
        return img.clone();
    }
    imageops::resize(img, size as u32, size as u32, imageops::FilterType::Triangle)
}

/// Horizontal flip (an involution on the pixel grid).
pub fn hflip(img: &RgbImage) -> RgbImage {
    imageops::flip_horizontal(img)
}

/// Per-channel histogram equalization on 8-bit intensities: each value maps
/// to `round((cdf(v) - cdf_min) / (n - cdf_min) * 255)`. Constant channels
/// are left unchanged.
pub fn hist_equalize(img: &RgbImage) -> RgbImage {
    let n = (img.width() * img.height()) as u64;
    let mut out = img.clone();
    for c in 0..3 {
        let mut hist = [0u64; 256];
        for p in img.pixels() {
            hist[p.0[c] as usize] += 1;
        }
        let mut cdf = [0u64; 256];
        let mut acc = 0u64;
        for (v, count) in hist.iter().enumerate() {
            acc += count;
            cdf[v] = acc;
        }
        let cdf_min = hist
            .iter()
            .position(|&h| h > 0)
            .map(|v| cdf[v])
            .unwrap_or(0);
        if cdf_min == n {
            continue;
        }
        let denom = (n - cdf_min) as f64;
        let mut lut = [0u8; 256];
        for (v, entry) in lut.iter_mut().enumerate() {
            let num = cdf[v].saturating_sub(cdf_min) as f64;
            *entry = (num / denom * 255.0).round() as u8;
        }
        for p in out.pixels_mut() {
            p.0[c] = lut[p.0[c] as usize];
        }
    }
    out
}

/// Sampled multipliers and hue shift of one jitter block application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue_degrees: f64,
}

impl JitterFactors {
    pub const IDENTITY: JitterFactors =
        JitterFactors { brightness: 1.0, contrast: 1.0, saturation: 1.0, hue_degrees: 0.0 };

    fn sample(strength: f64, rng: &mut ChaCha8Rng) -> Self {
        let lo = 1.0 - strength;
        let hi = 1.0 + strength;
        JitterFactors {
            brightness: rng.random_range(lo..=hi),
            contrast: rng.random_range(lo..=hi),
            saturation: rng.random_range(lo..=hi),
            hue_degrees: rng.random_range(-strength * 180.0..=strength * 180.0),
        }
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn luma(px: &[f64; 3]) -> f64 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

/// RGB in [0,1] to (hue degrees in [0,360), saturation, value).
pub fn rgb_to_hsv(px: [f64; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (px[0], px[1], px[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h.rem_euclid(360.0), s, max)
}

/// Inverse of [`rgb_to_hsv`].
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0).rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Applies the jitter block to float pixels in [0,1], in fixed order
/// brightness, contrast, saturation, hue, clamping back into [0,1].
pub fn apply_color_jitter(pixels: &mut [[f64; 3]], f: &JitterFactors) {
    for px in pixels.iter_mut() {
        for ch in px.iter_mut() {
            *ch *= f.brightness;
        }
    }
    let mean: f64 = pixels.iter().map(luma).sum::<f64>() / pixels.len() as f64;
    for px in pixels.iter_mut() {
        for ch in px.iter_mut() {
            *ch = mean + f.contrast * (*ch - mean);
        }
    }
    for px in pixels.iter_mut() {
        let l = luma(px);
        for ch in px.iter_mut() {
            *ch = l + f.saturation * (*ch - l);
        }
    }
    if f.hue_degrees != 0.0 {
        for px in pixels.iter_mut() {
            let clamped = [
                px[0].clamp(0.0, 1.0),
                px[1].clamp(0.0, 1.0),
                px[2].clamp(0.0, 1.0),
            ];
            let (h, s, v) = rgb_to_hsv(clamped);
            *px = hsv_to_rgb(h + f.hue_degrees, s, v);
        }
    }
    for px in pixels.iter_mut() {
        for ch in px.iter_mut() {
            *ch = ch.clamp(0.0, 1.0);
        }
    }
}

/// Full pipeline: decoded image to a normalized `target x target x 3`
/// float tensor. In eval mode the result is a deterministic function of
/// the input; in train mode the stochastic stages draw from `rng`.
pub fn transform<T: Scalar>(
    img: &RgbImage,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array3<T>> {
    if img.width() < 8 || img.height() < 8 {
        return Err(Error::data(format!(
            "image too small to transform: {}x{} (need at least 8x8)",
            img.width(),
            img.height()
        )));
    }
    let mut u8_img = resize_bilinear(img, cfg.target_size);
    let mut jitter = None;
    if cfg.train_mode {
        if rng.random::<f64>() < cfg.hist_eq_prob {
            u8_img = hist_equalize(&u8_img);
        }
        if rng.random::<f64>() < cfg.hflip_prob {
            u8_img = hflip(&u8_img);
        }
        if rng.random::<f64>() < cfg.jitter_prob {
            jitter = Some(JitterFactors::sample(cfg.jitter_strength, rng));
        }
    }

    let size = cfg.target_size;
    let mut pixels: Vec<[f64; 3]> = u8_img
        .pixels()
        .map(|p| [p.0[0] as f64 / 255.0, p.0[1] as f64 / 255.0, p.0[2] as f64 / 255.0])
        .collect();
    if let Some(f) = jitter {
        apply_color_jitter(&mut pixels, &f);
    }

    let mut out = Array3::zeros((size, size, 3));
    for (i, px) in pixels.iter().enumerate() {
        let (y, x) = (i / size, i % size);
        for c in 0..3 {
            out[(y, x, c)] =
                fl::<T>((px[c] - cfg.normalize_mean[c]) / cfg.normalize_std[c]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use image::Rgb;

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            Rgb([
                ((x * 7 + y * 3) % 256) as u8,
                ((x * 13 + y * 5) % 256) as u8,
                ((x * 3 + y * 11) % 256) as u8,
            ])
        })
    }

    #[test]
    fn output_shape_is_exact_for_any_input() {
        let cfg = AugmentConfig { target_size: 224, ..AugmentConfig::default() };
        let mut r = stream(0, &[0]);
        for (w, h) in [(17, 33), (224, 224), (640, 480)] {
            let out = transform::<f32>(&gradient_image(w, h), &cfg, &mut r).unwrap();
            assert_eq!(out.dim(), (224, 224, 3));
        }
        let tiny = gradient_image(7, 20);
        assert!(transform::<f32>(&tiny, &cfg, &mut r).is_err());
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = gradient_image(31, 17);
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn hist_equalization_fixes_uniform_histograms() {
        // Every intensity appears equally often, so the cdf mapping is the
        // identity up to quantization.
        let img = RgbImage::from_fn(256, 256, |x, y| {
            let v = y as u8;
            let _ = x;
            Rgb([v, v, v])
        });
        let eq = hist_equalize(&img);
        assert_eq!(eq, img);
    }

    #[test]
    fn hist_equalization_matches_direct_reference() {
        // Independent re-derivation of the cumulative-histogram mapping,
        // computed directly on the test image.
        let img = gradient_image(37, 23);
        let eq = hist_equalize(&img);
        let n = 37u64 * 23;
        for c in 0..3 {
            let mut hist = [0u64; 256];
            for p in img.pixels() {
                hist[p.0[c] as usize] += 1;
            }
            let cdf =
                |v: u8| -> u64 { hist[..=v as usize].iter().sum() };
            let cdf_min = (0..=255u8).map(cdf).find(|&x| x > 0).unwrap();
            for (p, q) in img.pixels().zip(eq.pixels()) {
                let expected =
                    ((cdf(p.0[c]) - cdf_min) as f64 / (n - cdf_min) as f64 * 255.0).round() as u8;
                assert_eq!(q.0[c], expected);
            }
        }
    }

    #[test]
    fn constant_channel_survives_equalization() {
        let img = RgbImage::from_pixel(16, 16, Rgb([100, 0, 255]));
        let eq = hist_equalize(&img);
        assert_eq!(eq, img);
    }

    #[test]
    fn eval_mode_is_pure_and_matches_probability_zero_training() {
        let img = gradient_image(40, 40);
        let eval_cfg = AugmentConfig {
            target_size: 32,
            train_mode: false,
            ..AugmentConfig::default()
        };
        let mut r1 = stream(1, &[1]);
        let mut r2 = stream(99, &[99]);
        let a = transform::<f64>(&img, &eval_cfg, &mut r1).unwrap();
        let b = transform::<f64>(&img, &eval_cfg, &mut r2).unwrap();
        assert_eq!(a, b, "eval transform ignores the rng");

        let zeroed = AugmentConfig {
            target_size: 32,
            hist_eq_prob: 0.0,
            hflip_prob: 0.0,
            jitter_prob: 0.0,
            train_mode: true,
            ..AugmentConfig::default()
        };
        let c = transform::<f64>(&img, &zeroed, &mut stream(5, &[5])).unwrap();
        assert_eq!(a, c, "train mode with all probabilities zero equals eval mode");
    }

    #[test]
    fn train_transform_is_deterministic_under_a_fixed_stream() {
        let img = gradient_image(64, 48);
        let cfg = AugmentConfig { target_size: 32, ..AugmentConfig::default() };
        let a = transform::<f32>(&img, &cfg, &mut stream(7, &[3])).unwrap();
        let b = transform::<f32>(&img, &cfg, &mut stream(7, &[3])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_jitter_changes_nothing() {
        let mut pixels = vec![[0.2, 0.5, 0.9], [0.0, 1.0, 0.4]];
        let orig = pixels.clone();
        apply_color_jitter(&mut pixels, &JitterFactors::IDENTITY);
        for (a, b) in pixels.iter().zip(&orig) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hue_rotation_round_trips() {
        let px = [0.7, 0.3, 0.1];
        let (h, s, v) = rgb_to_hsv(px);
        let back = hsv_to_rgb(h, s, v);
        for c in 0..3 {
            assert!((px[c] - back[c]).abs() < 1e-12);
        }
        // rotating by 360 degrees is the identity
        let rot = hsv_to_rgb(h + 360.0, s, v);
        for c in 0..3 {
            assert!((px[c] - rot[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn undecodable_image_error_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.png");
        std::fs::write(&path, b"not a png at all").unwrap();
        let err = load_image(&path).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }

    #[test]
    fn config_validation_catches_bad_probabilities() {
        let mut cfg = AugmentConfig::default();
        cfg.validate().unwrap();
        cfg.hist_eq_prob = 1.5;
        assert!(cfg.validate().is_err());
        cfg.hist_eq_prob = 0.5;
        cfg.normalize_std = [0.0, 1.0, 1.0];
        assert!(cfg.validate().is_err());
    }
}
