//! Differentiable placement of the patch onto detected objects.
//!
//! For every final-stage detection of the target class the patch is resampled
//! (bilinear) into a square at the box center and composited opaquely.
//! Later placements overwrite earlier ones. [`patch_gradient`] maps gradients
//! on the output images back to patch pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{BoundingBox, DetectionSet};
use crate::ensemble::{maybe_cutout, CutoutRegion, PatchView};
use crate::error::{Error, Result};
use crate::image::{bilinear_axis, lerp, Image, CHANNELS};

/// How the patch side relates to the box size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideMode {
    /// `scale · sqrt(w · h)`
    #[default]
    GeometricMean,
    /// `scale · max(w, h)`
    MaxSide,
}

/// Per-placement pose perturbation. Zero magnitudes disable a component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseJitter {
    pub rotation_deg: f64,
    pub brightness: f64,
    pub contrast: (f64, f64),
    /// Center shift as a fraction of the box half-extent.
    pub center_shift: f64,
}

impl Default for PoseJitter {
    fn default() -> Self {
        Self {
            rotation_deg: 20.0,
            brightness: 0.1,
            contrast: (0.9, 1.1),
            center_shift: 0.0,
        }
    }
}

impl PoseJitter {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            brightness: 0.0,
            contrast: (1.0, 1.0),
            center_shift: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub target: BoundingBox,
    pub side: usize,
    /// Square center in pixel coordinates (x, y).
    pub center: (f64, f64),
    pub rotation_deg: f64,
    pub clipped: bool,
    left: isize,
    top: isize,
}

impl Placement {
    /// Top-left corner of the (unrotated) square in pixels.
    pub fn origin(&self) -> (isize, isize) {
        (self.left, self.top)
    }
}

fn round_half_up(v: f64) -> isize {
    (v + 0.5).floor() as isize
}

/// Square placement for `bbox` in an image of `image_size = (height, width)`.
/// Returns `None` when the side rounds to zero pixels.
pub fn compute_placement<R: Rng + ?Sized>(
    bbox: &BoundingBox,
    scale: f64,
    image_size: (usize, usize),
    side_mode: SideMode,
    jitter: Option<(&PoseJitter, &mut R)>,
) -> Result<Option<Placement>> {
    let (ih, iw) = image_size;
    if ih == 0 || iw == 0 {
        return Err(Error::Argument("image size must be at least 1x1".into()));
    }
    if !(scale >= 0.0 && scale <= 1.0) {
        return Err(Error::Argument(format!("patch scale {scale} not in (0,1]")));
    }
    let w_px = bbox.width() * iw as f64;
    let h_px = bbox.height() * ih as f64;
    let side_f = match side_mode {
        SideMode::GeometricMean => scale * (w_px * h_px).sqrt(),
        SideMode::MaxSide => scale * w_px.max(h_px),
    };
    let side = side_f.round() as usize;
    if side == 0 {
        return Ok(None);
    }
    let (bcx, bcy) = bbox.center();
    let (mut cx, mut cy) = (bcx * iw as f64, bcy * ih as f64);
    let mut rotation_deg = 0.0;
    if let Some((j, rng)) = jitter {
        if j.center_shift > 0.0 {
            cx += rng.gen_range(-1.0..=1.0) * j.center_shift * w_px / 2.0;
            cy += rng.gen_range(-1.0..=1.0) * j.center_shift * h_px / 2.0;
        }
        if j.rotation_deg > 0.0 {
            rotation_deg = rng.gen_range(-j.rotation_deg..=j.rotation_deg);
        }
    }
    let left = round_half_up(cx - side as f64 / 2.0);
    let top = round_half_up(cy - side as f64 / 2.0);
    let half_extent = if rotation_deg == 0.0 {
        0.0
    } else {
        let t = rotation_deg.to_radians();
        side as f64 / 2.0 * (t.cos().abs() + t.sin().abs() - 1.0)
    };
    let s = side as f64;
    let clipped = (left as f64) - half_extent < 0.0
        || (top as f64) - half_extent < 0.0
        || left as f64 + s + half_extent > iw as f64
        || top as f64 + s + half_extent > ih as f64;
    Ok(Some(Placement {
        target: *bbox,
        side,
        center: (left as f64 + s / 2.0, top as f64 + s / 2.0),
        rotation_deg,
        clipped,
        left,
        top,
    }))
}

/// Train-time cutout settings applied independently to each placement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoutSettings {
    pub prob: f64,
    pub ratio: f64,
    pub fill: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApplyOptions {
    pub scale: f64,
    pub target_class: usize,
    pub side_mode: SideMode,
    pub jitter: Option<PoseJitter>,
    pub cutout: Option<CutoutSettings>,
}

impl ApplyOptions {
    /// Plain placement: no jitter, no cutout.
    pub fn plain(scale: f64, target_class: usize) -> Self {
        Self {
            scale,
            target_class,
            side_mode: SideMode::GeometricMean,
            jitter: None,
            cutout: None,
        }
    }
}

/// Everything needed to route gradients back from one composited square.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementRecord {
    pub image_index: usize,
    pub placement: Placement,
    pub mask: Option<CutoutRegion>,
    pub brightness: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone)]
pub struct PatchedBatch {
    pub images: Vec<Image>,
    pub records: Vec<PlacementRecord>,
    /// Target detections whose placement was degenerate.
    pub skipped: usize,
}

impl PatchedBatch {
    pub fn placements(&self) -> usize {
        self.records.len()
    }

    pub fn placements_in(&self, image_index: usize) -> usize {
        self.records
            .iter()
            .filter(|r| r.image_index == image_index)
            .count()
    }
}

/// One covered output pixel and where it samples the patch.
struct Footprint {
    y: usize,
    x: usize,
    py: f64,
    px: f64,
}

/// Output pixels covered by a placement, with continuous patch coordinates.
fn footprint(p: &Placement, img_h: usize, img_w: usize, ph: usize, pw: usize) -> Vec<Footprint> {
    let s = p.side as f64;
    let mut out = Vec::new();
    if p.rotation_deg == 0.0 {
        let y_lo = p.top.max(0) as usize;
        let y_hi = (p.top + p.side as isize).clamp(0, img_h as isize) as usize;
        let x_lo = p.left.max(0) as usize;
        let x_hi = (p.left + p.side as isize).clamp(0, img_w as isize) as usize;
        for y in y_lo..y_hi {
            let v = (y as f64 - p.top as f64 + 0.5) / s;
            for x in x_lo..x_hi {
                let u = (x as f64 - p.left as f64 + 0.5) / s;
                out.push(Footprint {
                    y,
                    x,
                    py: v * ph as f64 - 0.5,
                    px: u * pw as f64 - 0.5,
                });
            }
        }
        return out;
    }
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let (cx, cy) = p.center;
    let r = s / 2.0 * std::f64::consts::SQRT_2;
    let y_lo = (cy - r).floor().max(0.0) as usize;
    let y_hi = ((cy + r).ceil().max(0.0) as usize).min(img_h);
    let x_lo = (cx - r).floor().max(0.0) as usize;
    let x_hi = ((cx + r).ceil().max(0.0) as usize).min(img_w);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            // inverse rotation into the square's frame
            let lx = cos * dx + sin * dy;
            let ly = -sin * dx + cos * dy;
            if lx.abs() >= s / 2.0 || ly.abs() >= s / 2.0 {
                continue;
            }
            out.push(Footprint {
                y,
                x,
                py: (ly / s + 0.5) * ph as f64 - 0.5,
                px: (lx / s + 0.5) * pw as f64 - 0.5,
            });
        }
    }
    out
}

fn sample_view(view: &PatchView<'_>, py: f64, px: f64, c: usize) -> f64 {
    let (y0, y1, fy) = bilinear_axis(py, view.height());
    let (x0, x1, fx) = bilinear_axis(px, view.width());
    let top = lerp(view.value(y0, x0, c), view.value(y0, x1, c), fx);
    let bottom = lerp(view.value(y1, x0, c), view.value(y1, x1, c), fx);
    lerp(top, bottom, fy)
}

/// Composites `patch` onto every target detection of each image.
pub fn apply_patch<R: Rng + ?Sized>(
    images: &[Image],
    detections: &[DetectionSet],
    patch: &Image,
    opts: &ApplyOptions,
    rng: &mut R,
) -> Result<PatchedBatch> {
    if images.len() != detections.len() {
        return Err(Error::shape(
            format!("{} detection sets", images.len()),
            detections.len().to_string(),
        ));
    }
    let (ph, pw) = (patch.height(), patch.width());
    let mut out = images.to_vec();
    let mut records = Vec::new();
    let mut skipped = 0;
    for (idx, (img, dets)) in out.iter_mut().zip(detections).enumerate() {
        let (ih, iw) = (img.height(), img.width());
        for det in dets.of_class(opts.target_class) {
            let jitter = opts.jitter.as_ref().map(|j| (j, &mut *rng));
            let Some(placement) =
                compute_placement(&det.bbox, opts.scale, (ih, iw), opts.side_mode, jitter)?
            else {
                skipped += 1;
                continue;
            };
            let (brightness, contrast) = match &opts.jitter {
                Some(j) => (
                    if j.brightness > 0.0 {
                        rng.gen_range(-j.brightness..=j.brightness)
                    } else {
                        0.0
                    },
                    if j.contrast.0 < j.contrast.1 {
                        rng.gen_range(j.contrast.0..=j.contrast.1)
                    } else {
                        j.contrast.0
                    },
                ),
                None => (0.0, 1.0),
            };
            let mask = opts
                .cutout
                .and_then(|c| maybe_cutout(ph, pw, c.prob, c.ratio, c.fill, rng));
            let view = PatchView {
                pixels: patch,
                mask,
            };
            for f in footprint(&placement, ih, iw, ph, pw) {
                for c in 0..CHANNELS {
                    let v = sample_view(&view, f.py, f.px, c);
                    let v = if brightness == 0.0 && contrast == 1.0 {
                        v
                    } else {
                        (contrast * v + brightness).clamp(0.0, 1.0)
                    };
                    img.set(f.y, f.x, c, v);
                }
            }
            records.push(PlacementRecord {
                image_index: idx,
                placement,
                mask,
                brightness,
                contrast,
            });
        }
    }
    Ok(PatchedBatch {
        images: out,
        records,
        skipped,
    })
}

/// Pulls output-image gradients back onto the patch (HWC, same shape as
/// `patch`). Pixels overwritten by a later placement route their gradient to
/// that placement only; masked patch pixels receive nothing.
pub fn patch_gradient(
    batch: &PatchedBatch,
    patch: &Image,
    image_grads: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if image_grads.len() != batch.images.len() {
        return Err(Error::shape(
            format!("{} image gradients", batch.images.len()),
            image_grads.len().to_string(),
        ));
    }
    let (ph, pw) = (patch.height(), patch.width());
    let mut grad = vec![0.0; ph * pw * CHANNELS];
    let mut claimed: Vec<Vec<bool>> = batch
        .images
        .iter()
        .map(|im| vec![false; im.height() * im.width()])
        .collect();
    for rec in batch.records.iter().rev() {
        let img = &batch.images[rec.image_index];
        let (ih, iw) = (img.height(), img.width());
        let g_img = &image_grads[rec.image_index];
        if g_img.len() != ih * iw * CHANNELS {
            return Err(Error::shape(
                (ih * iw * CHANNELS).to_string(),
                g_img.len().to_string(),
            ));
        }
        let view = PatchView {
            pixels: patch,
            mask: rec.mask,
        };
        let jittered = !(rec.brightness == 0.0 && rec.contrast == 1.0);
        for f in footprint(&rec.placement, ih, iw, ph, pw) {
            let flat = f.y * iw + f.x;
            if std::mem::replace(&mut claimed[rec.image_index][flat], true) {
                continue;
            }
            let (y0, y1, fy) = bilinear_axis(f.py, ph);
            let (x0, x1, fx) = bilinear_axis(f.px, pw);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            for c in 0..CHANNELS {
                let mut g = g_img[flat * CHANNELS + c];
                if g == 0.0 {
                    continue;
                }
                if jittered {
                    let pre = rec.contrast * sample_view(&view, f.py, f.px, c) + rec.brightness;
                    if !(0.0..=1.0).contains(&pre) {
                        continue;
                    }
                    g *= rec.contrast;
                }
                for &(ty, tx, w) in &taps {
                    if w != 0.0 && !view.is_masked(ty, tx) {
                        grad[(ty * pw + tx) * CHANNELS + c] += g * w;
                    }
                }
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{Detection, StageKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set_with(boxes: &[BoundingBox], class_id: usize) -> DetectionSet {
        DetectionSet {
            image_index: 0,
            stage: StageKind::Final,
            detections: boxes
                .iter()
                .map(|&bbox| Detection {
                    bbox,
                    objectness: 0.9,
                    class_id,
                    class_score: 0.9,
                })
                .collect(),
        }
    }

    fn no_jitter() -> Option<(&'static PoseJitter, &'static mut ChaCha8Rng)> {
        None
    }

    #[test]
    fn placement_side_and_center() {
        let b = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let p = compute_placement(&b, 0.15, (200, 200), SideMode::GeometricMean, no_jitter())
            .unwrap()
            .unwrap();
        assert_eq!(p.side, 15);
        assert_eq!(p.origin(), (93, 93));
        assert_eq!(p.center, (100.5, 100.5));
        assert!(!p.clipped);
        let full = compute_placement(&b, 1.0, (200, 200), SideMode::GeometricMean, no_jitter())
            .unwrap()
            .unwrap();
        assert_eq!(full.side, 100);
    }

    #[test]
    fn corner_box_is_clipped() {
        let b = BoundingBox::new(0.0, 0.0, 0.1, 0.1).unwrap();
        let p = compute_placement(&b, 1.0, (100, 100), SideMode::MaxSide, no_jitter())
            .unwrap()
            .unwrap();
        assert_eq!(p.side, 10);
        assert!(!p.clipped);
        let b = BoundingBox::new(0.0, 0.0, 0.1, 0.3).unwrap();
        let p = compute_placement(&b, 1.0, (100, 100), SideMode::MaxSide, no_jitter())
            .unwrap()
            .unwrap();
        assert!(p.clipped);
        let mut img = Image::filled(100, 100, 0.0);
        let patch = Image::filled(4, 4, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = apply_patch(
            std::slice::from_ref(&img),
            &[set_with(&[b], 0)],
            &patch,
            &ApplyOptions {
                side_mode: SideMode::MaxSide,
                ..ApplyOptions::plain(1.0, 0)
            },
            &mut rng,
        )
        .unwrap();
        img = batch.images[0].clone();
        let covered = img.data().iter().filter(|&&v| v == 1.0).count() / 3;
        // side 30 centered at (5, 15): 10 columns fall off the left edge
        assert_eq!(covered, 20 * 30);
    }

    #[test]
    fn degenerate_side_is_skipped() {
        let b = BoundingBox::new(0.5, 0.5, 0.51, 0.51).unwrap();
        let p = compute_placement(&b, 0.1, (64, 64), SideMode::GeometricMean, no_jitter()).unwrap();
        assert!(p.is_none());
    }

    #[test]
    fn gray_patch_changes_exactly_the_square() {
        let img = Image::filled(200, 200, 0.2);
        let b = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let patch = Image::filled(30, 30, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_patch(
            std::slice::from_ref(&img),
            &[set_with(&[b], 0)],
            &patch,
            &ApplyOptions::plain(0.15, 0),
            &mut rng,
        )
        .unwrap();
        let patched = &out.images[0];
        let mut rows = std::collections::BTreeSet::new();
        let mut cols = std::collections::BTreeSet::new();
        let mut n = 0;
        for y in 0..200 {
            for x in 0..200 {
                if patched.get(y, x, 0) != img.get(y, x, 0) {
                    rows.insert(y);
                    cols.insert(x);
                    n += 1;
                }
            }
        }
        assert_eq!(n, 225);
        assert_eq!(rows.iter().copied().collect::<Vec<_>>(), (93..108).collect::<Vec<_>>());
        assert_eq!(cols.iter().copied().collect::<Vec<_>>(), (93..108).collect::<Vec<_>>());
    }

    #[test]
    fn no_targets_pass_through() {
        let img = Image::filled(32, 32, 0.3);
        let b = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_patch(
            std::slice::from_ref(&img),
            &[set_with(&[b], 1)],
            &Image::filled(8, 8, 1.0),
            &ApplyOptions::plain(0.5, 0),
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.images[0], img);
        assert_eq!(out.placements(), 0);
    }

    #[test]
    fn uniform_gray_is_bit_identical_with_positive_gradient() {
        let img = Image::filled(64, 64, 0.5);
        let patch = Image::filled(16, 16, 0.5);
        let b = BoundingBox::new(0.2, 0.2, 0.8, 0.8).unwrap();
        let dets = [set_with(&[b], 0)];
        let opts = ApplyOptions::plain(0.5, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_patch(std::slice::from_ref(&img), &dets, &patch, &opts, &mut rng).unwrap();
        assert_eq!(out.images[0], img);
        // d out[y,x,c] / d patch[i,j,c] for the pixel at the square's center,
        // checked by central differences.
        let (left, top) = out.records[0].placement.origin();
        let (y, x) = ((top + 9) as usize, (left + 9) as usize);
        let probe = (8usize, 8usize);
        let mut up = vec![0.0; 64 * 64 * 3];
        up[(y * 64 + x) * 3] = 1.0;
        let analytic = patch_gradient(&out, &patch, &[up]).unwrap()[(probe.0 * 16 + probe.1) * 3];
        let h = 1e-4;
        let eval = |d: f64| {
            let mut p = patch.clone();
            p.set(probe.0, probe.1, 0, 0.5 + d);
            let mut r = ChaCha8Rng::seed_from_u64(0);
            apply_patch(std::slice::from_ref(&img), &dets, &p, &opts, &mut r).unwrap().images[0]
                .get(y, x, 0)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!(analytic > 0.0);
        assert!((fd - analytic).abs() < 1e-9);
    }

    #[test]
    fn later_placements_win() {
        let img = Image::filled(40, 40, 0.0);
        let b = BoundingBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
        let mut dets = set_with(&[b, b], 0);
        dets.detections[1].objectness = 0.1;
        let patch = Image::filled(4, 4, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_patch(
            std::slice::from_ref(&img),
            &[dets],
            &patch,
            &ApplyOptions::plain(0.5, 0),
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.placements(), 2);
        let g = patch_gradient(&out, &patch, &[vec![1.0; 40 * 40 * 3]]).unwrap();
        // each covered pixel counts once: total gradient mass = covered pixels × 3
        let total: f64 = g.iter().sum();
        assert!((total - 100.0 * 3.0).abs() < 1e-9);
    }

    #[test]
    fn scale_monotone_coverage() {
        let b = BoundingBox::new(0.3, 0.3, 0.7, 0.7).unwrap();
        let mut last = 0;
        for k in 1..=10 {
            let p = compute_placement(&b, k as f64 / 10.0, (100, 100), SideMode::GeometricMean, no_jitter())
                .unwrap()
                .unwrap();
            let n = footprint(&p, 100, 100, 5, 5).len();
            assert!(n >= last);
            last = n;
        }
    }

    #[test]
    fn outside_pixels_are_conserved_with_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..48 * 48 * 3).map(|_| rng.gen()).collect();
        let img = Image::from_vec(48, 48, data).unwrap();
        let b = BoundingBox::new(0.2, 0.3, 0.6, 0.9).unwrap();
        let patch = Image::filled(10, 10, 0.9);
        let opts = ApplyOptions {
            jitter: Some(PoseJitter::default()),
            ..ApplyOptions::plain(0.6, 0)
        };
        let out = apply_patch(std::slice::from_ref(&img), &[set_with(&[b], 0)], &patch, &opts, &mut rng).unwrap();
        let p = out.records[0].placement;
        let inside: std::collections::HashSet<(usize, usize)> =
            footprint(&p, 48, 48, 10, 10).iter().map(|f| (f.y, f.x)).collect();
        for y in 0..48 {
            for x in 0..48 {
                if !inside.contains(&(y, x)) {
                    for c in 0..3 {
                        assert_eq!(out.images[0].get(y, x, c), img.get(y, x, c));
                    }
                }
            }
        }
        assert!(out.images[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
