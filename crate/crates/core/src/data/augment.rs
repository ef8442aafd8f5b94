//! Training-time augmentation: horizontal flip, pad-and-crop, colour jitter.

use image::{imageops, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Zero padding on every side before the random crop back to size.
    pub pad: u32,
    /// Brightness factor drawn from `[1 − b, 1 + b]`.
    pub brightness: f64,
    /// Saturation factor drawn from `[1 − s, 1 + s]`.
    pub saturation: f64,
    /// Hue rotation in degrees drawn from `[−h, h]`.
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            pad: 2,
            brightness: 0.2,
            saturation: 0.2,
            hue: 10.0,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            pad: 0,
            brightness: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }
}

pub fn hflip(img: &RgbImage) -> RgbImage {
    imageops::flip_horizontal(img)
}

fn pad_crop<R: Rng + ?Sized>(img: &RgbImage, pad: u32, rng: &mut R) -> RgbImage {
    let (w, h) = img.dimensions();
    let dx = rng.random_range(0..=2 * pad);
    let dy = rng.random_range(0..=2 * pad);
    if pad == 0 {
        return img.clone();
    }
    RgbImage::from_fn(w, h, |x, y| {
        let sx = (x + dx) as i64 - pad as i64;
        let sy = (y + dy) as i64 - pad as i64;
        if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
            Rgb([0, 0, 0])
        } else {
            *img.get_pixel(sx as u32, sy as u32)
        }
    })
}

pub(crate) fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub(crate) fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn jitter(img: &mut RgbImage, brightness: f64, saturation: f64, hue: f64) {
    for p in img.pixels_mut() {
        let mut c = p.0.map(|v| v as f64 / 255.0);
        if hue != 0.0 {
            let mut hsv = rgb_to_hsv(c);
            hsv[0] += hue;
            c = hsv_to_rgb(hsv);
        }
        if saturation != 1.0 {
            let gray = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
            c = c.map(|v| gray + (v - gray) * saturation);
        }
        if brightness != 1.0 {
            c = c.map(|v| v * brightness);
        }
        p.0 = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
}

/// Random flip, crop and jitter. Draws a fixed number of values from `rng`
/// regardless of which stages are active.
pub fn augment<R: Rng + ?Sized>(img: &RgbImage, cfg: &AugmentConfig, rng: &mut R) -> RgbImage {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let mut out = if flip { hflip(img) } else { img.clone() };
    out = pad_crop(&out, cfg.pad, rng);
    let b = 1.0 + cfg.brightness * rng.random_range(-1.0..=1.0);
    let s = 1.0 + cfg.saturation * rng.random_range(-1.0..=1.0);
    let h = cfg.hue * rng.random_range(-1.0..=1.0);
    if cfg.brightness != 0.0 || cfg.saturation != 0.0 || cfg.hue != 0.0 {
        jitter(&mut out, b, s, h);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> RgbImage {
        RgbImage::from_fn(8, 12, |x, y| Rgb([(x * 30) as u8, (y * 20) as u8, ((x + y) * 7) as u8]))
    }

    #[test]
    fn double_flip_is_identity() {
        let img = sample();
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(hflip(&img).get_pixel(0, 3), img.get_pixel(7, 3));
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let img = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            assert_eq!(augment(&img, &AugmentConfig::none(), &mut rng), img);
        }
    }

    #[test]
    fn seeded_augmentation_repeats() {
        let img = sample();
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
        assert_eq!(a.dimensions(), img.dimensions());
    }

    #[test]
    fn hsv_round_trip() {
        for c in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let back = hsv_to_rgb(rgb_to_hsv(c));
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() < 1e-12);
            }
        }
    }
}
