//! Mild, natural-looking input augmentation applied before detection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub flip_prob: f64,
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift magnitude as a fraction of the color wheel.
    pub hue: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            crop_scale: (0.7, 1.0),
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.02,
            rotation_deg: 10.0,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            crop_scale: (1.0, 1.0),
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            rotation_deg: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Rejects policies outside the constrained envelope.
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        let bad = |what: &str| Err(Error::Config(format!("augmentation: {what}")));
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0,1]");
        }
        if !(0.7 <= lo && lo <= hi && hi <= 1.0) {
            return bad("crop_scale must satisfy 0.7 <= lo <= hi <= 1");
        }
        if !(0.0..=10.0).contains(&self.rotation_deg) {
            return bad("rotation_deg must lie in [0,10]");
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(0.0..=0.2).contains(&v) {
                return bad(&format!("{name} must lie in [0,0.2]"));
            }
        }
        Ok(())
    }
}

/// Applies each transform of `policy` independently; output is clamped to [0,1].
pub fn augment<R: Rng + ?Sized>(image: &Image, policy: &AugmentationPolicy, rng: &mut R) -> Image {
    let mut img = image.clone();
    if policy.flip_prob > 0.0 && rng.gen::<f64>() < policy.flip_prob {
        img = img.flip_horizontal();
    }
    let (lo, hi) = policy.crop_scale;
    if lo < 1.0 {
        let area = rng.gen_range(lo..=hi);
        if area < 1.0 {
            img = resized_crop(&img, area, rng);
        }
    }
    if policy.rotation_deg > 0.0 {
        let deg = rng.gen_range(-policy.rotation_deg..=policy.rotation_deg);
        img = rotate(&img, deg.to_radians());
    }
    if policy.brightness > 0.0 {
        let f = jitter_factor(policy.brightness, rng);
        for v in img.data_mut() {
            *v = (*v * f).clamp(0.0, 1.0);
        }
    }
    if policy.contrast > 0.0 {
        let f = jitter_factor(policy.contrast, rng);
        let n = (img.height() * img.width()) as f64;
        let mean = img.data().chunks_exact(CHANNELS).map(luma).sum::<f64>() / n;
        for v in img.data_mut() {
            *v = ((*v - mean) * f + mean).clamp(0.0, 1.0);
        }
    }
    if policy.saturation > 0.0 {
        let f = jitter_factor(policy.saturation, rng);
        for px in img.data_mut().chunks_exact_mut(CHANNELS) {
            let g = luma(px);
            for v in px.iter_mut() {
                *v = ((*v - g) * f + g).clamp(0.0, 1.0);
            }
        }
    }
    if policy.hue > 0.0 {
        let shift = rng.gen_range(-policy.hue..=policy.hue);
        for px in img.data_mut().chunks_exact_mut(CHANNELS) {
            let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
            let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
            px[0] = r.clamp(0.0, 1.0);
            px[1] = g.clamp(0.0, 1.0);
            px[2] = b.clamp(0.0, 1.0);
        }
    }
    img
}

fn jitter_factor<R: Rng + ?Sized>(mag: f64, rng: &mut R) -> f64 {
    rng.gen_range((1.0 - mag).max(0.0)..=1.0 + mag)
}

fn luma(px: &[f64]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Square-aspect crop covering `area` of the image, resized back to full size.
fn resized_crop<R: Rng + ?Sized>(img: &Image, area: f64, rng: &mut R) -> Image {
    let (h, w) = (img.height(), img.width());
    let side = area.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let oy = rng.gen_range(0..=h - ch);
    let ox = rng.gen_range(0..=w - cw);
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    let mut out = Image::filled(h, w, 0.0);
    for y in 0..h {
        let src_y = oy as f64 + (y as f64 + 0.5) * sy - 0.5;
        for x in 0..w {
            let src_x = ox as f64 + (x as f64 + 0.5) * sx - 0.5;
            for c in 0..CHANNELS {
                out.set(y, x, c, img.sample_bilinear(src_y, src_x, c));
            }
        }
    }
    out
}

/// Rotation about the image center; uncovered corners are filled with gray.
fn rotate(img: &Image, theta: f64) -> Image {
    let (h, w) = (img.height(), img.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let mut out = Image::filled(h, w, 0.5);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            if sx < -0.5 || sy < -0.5 || sx > w as f64 - 0.5 || sy > h as f64 - 0.5 {
                continue;
            }
            for c in 0..CHANNELS {
                out.set(y, x, c, img.sample_bilinear(sy, sx, c));
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h * 6.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}
