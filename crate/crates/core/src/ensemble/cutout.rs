//! Square masking of the patch view used for compositing.
//!
//! The patch parameters are never modified: the mask lives in a [`PatchView`],
//! so masked pixels simply receive no gradient for the step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)` filled with `fill`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoutRegion {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
    pub fill: f64,
}

impl CutoutRegion {
    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Round half up, so that a fractional mask side of `n + 0.5` becomes `n + 1`.
fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor().max(0.0) as usize
}

/// Mask of `round(ratio·H) × round(ratio·W)` centered at `center = (x, y)`,
/// clipped at the patch borders. `None` when the mask is empty.
pub fn cutout_region(
    height: usize,
    width: usize,
    center: (usize, usize),
    ratio: f64,
    fill: f64,
) -> Result<Option<CutoutRegion>> {
    let (cx, cy) = center;
    if cx >= width || cy >= height {
        return Err(Error::Argument(format!(
            "cutout center ({cx}, {cy}) outside {height}x{width} patch"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) || !(0.0..=1.0).contains(&fill) {
        return Err(Error::Argument(format!(
            "cutout ratio {ratio} and fill {fill} must lie in [0,1]"
        )));
    }
    let side_h = round_half_up(ratio * height as f64) as isize;
    let side_w = round_half_up(ratio * width as f64) as isize;
    if side_h == 0 || side_w == 0 {
        return Ok(None);
    }
    let y_start = cy as isize - side_h / 2;
    let x_start = cx as isize - side_w / 2;
    let clip = |v: isize, len: usize| v.clamp(0, len as isize) as usize;
    let region = CutoutRegion {
        y0: clip(y_start, height),
        y1: clip(y_start + side_h, height),
        x0: clip(x_start, width),
        x1: clip(x_start + side_w, width),
        fill,
    };
    Ok((region.area() > 0).then_some(region))
}

/// A patch as seen by the compositor: the underlying pixels plus an optional mask.
#[derive(Debug, Clone, Copy)]
pub struct PatchView<'a> {
    pub pixels: &'a Image,
    pub mask: Option<CutoutRegion>,
}

impl<'a> PatchView<'a> {
    pub fn unmasked(pixels: &'a Image) -> Self {
        Self { pixels, mask: None }
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    #[inline]
    pub fn is_masked(&self, y: usize, x: usize) -> bool {
        self.mask.is_some_and(|m| m.contains(y, x))
    }

    #[inline]
    pub fn value(&self, y: usize, x: usize, c: usize) -> f64 {
        match self.mask {
            Some(m) if m.contains(y, x) => m.fill,
            _ => self.pixels.get(y, x, c),
        }
    }

    /// Materializes the masked view.
    pub fn to_image(&self) -> Image {
        let (h, w) = (self.height(), self.width());
        let mut out = self.pixels.clone();
        if let Some(m) = self.mask {
            for y in m.y0..m.y1 {
                for x in m.x0..m.x1 {
                    for c in 0..CHANNELS {
                        out.set(y, x, c, m.fill);
                    }
                }
            }
        }
        debug_assert_eq!((out.height(), out.width()), (h, w));
        out
    }
}

/// Masks a square centered at `center`; a random center is drawn when `None`.
pub fn cutout<'a, R: Rng + ?Sized>(
    pixels: &'a Image,
    center: Option<(usize, usize)>,
    ratio: f64,
    fill: f64,
    rng: &mut R,
) -> Result<PatchView<'a>> {
    let (h, w) = (pixels.height(), pixels.width());
    let center = center.unwrap_or_else(|| (rng.gen_range(0..w), rng.gen_range(0..h)));
    Ok(PatchView {
        pixels,
        mask: cutout_region(h, w, center, ratio, fill)?,
    })
}

/// With probability `prob`, a mask at a uniformly random center.
pub fn maybe_cutout<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    prob: f64,
    ratio: f64,
    fill: f64,
    rng: &mut R,
) -> Option<CutoutRegion> {
    if rng.gen::<f64>() >= prob {
        return None;
    }
    let center = (rng.gen_range(0..width), rng.gen_range(0..height));
    cutout_region(height, width, center, ratio, fill).ok().flatten()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn count_fill(img: &Image, fill: f64) -> usize {
        (0..img.height())
            .flat_map(|y| (0..img.width()).map(move |x| (y, x)))
            .filter(|&(y, x)| (0..3).all(|c| img.get(y, x, c) == fill))
            .count()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let patch = Image::filled(10, 10, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let view = cutout(&patch, Some((5, 5)), 0.0, 0.5, &mut rng).unwrap();
        assert!(view.mask.is_none());
        assert_eq!(view.to_image(), patch);
    }

    #[test]
    fn interior_and_corner_counts() {
        let patch = Image::filled(300, 300, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let center = cutout(&patch, Some((150, 150)), 0.4, 0.5, &mut rng).unwrap();
        assert_eq!(count_fill(&center.to_image(), 0.5), 120 * 120);
        let corner = cutout(&patch, Some((0, 0)), 0.4, 0.5, &mut rng).unwrap();
        let m = corner.mask.unwrap();
        assert_eq!((m.y0, m.y1, m.x0, m.x1), (0, 60, 0, 60));
        assert_eq!(count_fill(&corner.to_image(), 0.5), 3600);
    }

    #[test]
    fn out_of_bounds_center_is_rejected() {
        let patch = Image::filled(4, 4, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            cutout(&patch, Some((4, 0)), 0.5, 0.5, &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn half_sizes_round_up() {
        // 0.5 * 5 = 2.5 -> 3
        let r = cutout_region(5, 5, (2, 2), 0.5, 0.0).unwrap().unwrap();
        assert_eq!((r.y1 - r.y0, r.x1 - r.x0), (3, 3));
        assert_eq!((r.y0, r.x0), (1, 1));
    }

    #[test]
    fn probability_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..100).all(|_| maybe_cutout(8, 8, 0.0, 0.4, 0.5, &mut rng).is_none()));
        let masks: Vec<_> = (0..100)
            .map(|_| maybe_cutout(8, 8, 1.0, 0.4, 0.5, &mut rng).unwrap())
            .collect();
        assert!(masks.iter().any(|m| *m != masks[0]));
    }

    #[test]
    fn masked_fraction_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| maybe_cutout(300, 300, 0.9, 0.4, 0.5, &mut rng).is_some())
            .count();
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.9).abs() <= 0.01, "{frac}");
    }
}
