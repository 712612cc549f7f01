//! Floating-point RGB images in interleaved row-major (HWC) layout.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// An RGB image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::shape(
                format!("{height}x{width}x{CHANNELS} = {}", height * width * CHANNELS),
                data.len().to_string(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at integer
    /// positions), clamping to the border.
    pub fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f64 {
        let (y0, y1, fy) = bilinear_axis(y, self.height);
        let (x0, x1, fx) = bilinear_axis(x, self.width);
        let top = lerp(self.get(y0, x0, c), self.get(y0, x1, c), fx);
        let bottom = lerp(self.get(y1, x0, c), self.get(y1, x1, c), fx);
        lerp(top, bottom, fy)
    }

    /// Bilinear resize to the given size (align-corners off).
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let mut out = Image::filled(height, width, 0.0);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let src_y = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let src_x = (x as f64 + 0.5) * sx - 0.5;
                for c in 0..CHANNELS {
                    out.set(y, x, c, self.sample_bilinear(src_y, src_x, c));
                }
            }
        }
        out
    }

    /// Aspect-preserving resize into a `size`×`size` canvas padded with gray.
    pub fn letterbox(&self, size: usize) -> Image {
        if self.height == size && self.width == size {
            return self.clone();
        }
        let scale = size as f64 / self.height.max(self.width) as f64;
        let nh = ((self.height as f64 * scale).round() as usize).clamp(1, size);
        let nw = ((self.width as f64 * scale).round() as usize).clamp(1, size);
        let resized = self.resize(nh, nw);
        let mut out = Image::filled(size, size, 0.5);
        let oy = (size - nh) / 2;
        let ox = (size - nw) / 2;
        for y in 0..nh {
            for x in 0..nw {
                for c in 0..CHANNELS {
                    out.set(oy + y, ox + x, c, resized.get(y, x, c));
                }
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| quantize(self.get(y as usize, x as usize, c));
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Image {
            height: h,
            width: w,
            data,
        }
    }

    pub fn open(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic_with(path, |tmp| {
            self.to_rgb8()
                .save_with_format(tmp, image::ImageFormat::Png)
                .map_err(|e| std::io::Error::other(e.to_string()))
        })
    }

    /// Places `other` to the right of `self`, padding the shorter one with black.
    pub fn side_by_side(&self, other: &Image) -> Image {
        let h = self.height.max(other.height);
        let mut out = Image::filled(h, self.width + other.width, 0.0);
        for (img, ox) in [(self, 0), (other, self.width)] {
            for y in 0..img.height {
                for x in 0..img.width {
                    for c in 0..CHANNELS {
                        out.set(y, ox + x, c, img.get(y, x, c));
                    }
                }
            }
        }
        out
    }
}

#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Integer neighbours and fractional weight along one axis, clamped to `[0, len)`.
#[inline]
pub(crate) fn bilinear_axis(pos: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let p = pos.clamp(0.0, max);
    let i0 = p.floor();
    let i0u = i0 as usize;
    let i1u = (i0u + 1).min(len - 1);
    (i0u, i1u, p - i0)
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_resample_is_exact() {
        let img = Image::filled(5, 7, 0.3);
        for &(y, x) in &[(0.2, 1.7), (3.5, 6.9), (-1.0, 10.0)] {
            assert_eq!(img.sample_bilinear(y, x, 1), 0.3);
        }
    }

    #[test]
    fn letterbox_preserves_aspect() {
        let img = Image::filled(10, 20, 1.0);
        let lb = img.letterbox(40);
        assert_eq!((lb.height(), lb.width()), (40, 40));
        // 20 rows of content, 10 rows of padding above and below
        assert_eq!(lb.get(0, 20, 0), 0.5);
        assert_eq!(lb.get(20, 20, 0), 1.0);
        assert_eq!(lb.get(39, 20, 0), 0.5);
    }

    #[test]
    fn flip_twice_is_identity() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|v| v as f64 / 18.0).collect();
        let img = Image::from_vec(2, 3, data).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_ne!(img.flip_horizontal(), img);
    }
}
