//! Image datasets: directories of image files and a synthetic shapes fixture.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detection::BoundingBox;
use crate::detector::GroundTruth;
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Ordered list of image files under a root directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl ImageDataset {
    /// Lists image files directly under `root`, sorted by file name.
    pub fn open(root: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_path(p))
            .collect();
        files.sort();
        Ok(Self {
            root: root.to_path_buf(),
            files,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Decodes every file and letterboxes it to `size`. Undecodable files are
    /// skipped and returned separately.
    pub fn load(&self, size: usize) -> (Vec<Image>, Vec<(PathBuf, Error)>) {
        let mut images = Vec::with_capacity(self.files.len());
        let mut failures = Vec::new();
        for path in &self.files {
            match Image::open(path) {
                Ok(img) => images.push(img.letterbox(size)),
                Err(e) => failures.push((path.clone(), e)),
            }
        }
        (images, failures)
    }
}

pub fn is_image_path(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Labelled synthetic images: tall filled rectangles (class 0, the attack
/// target) and discs (class 1) on a textured background.
#[derive(Debug, Clone)]
pub struct ShapesDataset {
    pub images: Vec<Image>,
    pub labels: Vec<Vec<GroundTruth>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesConfig {
    pub count: usize,
    pub size: usize,
    /// Grid used to keep object centers in distinct cells.
    pub grid: usize,
    pub max_targets: usize,
    pub max_distractors: usize,
    /// Chance that a target gets a random square painted over its center.
    /// Fitting on such images makes a detector tolerate neutral occluders.
    pub occlusion_prob: f64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            count: 64,
            size: 64,
            grid: 8,
            max_targets: 2,
            max_distractors: 1,
            occlusion_prob: 0.0,
            seed: 0,
        }
    }
}

impl ShapesDataset {
    pub fn generate(cfg: &ShapesConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut images = Vec::with_capacity(cfg.count);
        let mut labels = Vec::with_capacity(cfg.count);
        for _ in 0..cfg.count {
            let (img, lab) = shapes_image(cfg, &mut rng);
            images.push(img);
            labels.push(lab);
        }
        Self { images, labels }
    }

    /// One image holding a single target rectangle; returns it with its box.
    pub fn single_target(size: usize, seed: u64) -> (Image, BoundingBox) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = background(size, &mut rng);
        let s = size as f64;
        let (w, h) = (0.36 * s, 0.5 * s);
        let (x0, y0) = ((s - w) / 2.0, (s - h) / 2.0);
        let color = vivid_color(&mut rng);
        fill_rect(&mut img, x0, y0, w, h, color);
        let bbox = BoundingBox::new(x0 / s, y0 / s, (x0 + w) / s, (y0 + h) / s)
            .expect("box inside the image");
        (img, bbox)
    }
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let base: [f64; 3] = [
        rng.gen_range(0.25..0.6),
        rng.gen_range(0.25..0.6),
        rng.gen_range(0.25..0.6),
    ];
    let gy = rng.gen_range(-0.15..0.15);
    let gx = rng.gen_range(-0.15..0.15);
    let mut img = Image::filled(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let ramp = gy * (y as f64 / size as f64 - 0.5) + gx * (x as f64 / size as f64 - 0.5);
            for (c, b) in base.iter().enumerate() {
                let v = b + ramp + rng.gen_range(-0.06..0.06);
                img.set(y, x, c, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn vivid_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c = [rng.gen_range(0.0..0.25), rng.gen_range(0.0..0.25), rng.gen_range(0.0..0.25)];
    let hi = rng.gen_range(0..CHANNELS);
    c[hi] = rng.gen_range(0.8..1.0);
    if rng.gen_bool(0.5) {
        c[(hi + 1) % CHANNELS] = rng.gen_range(0.6..1.0);
    }
    c
}

fn fill_rect(img: &mut Image, x0: f64, y0: f64, w: f64, h: f64, color: [f64; 3]) {
    let size = img.width();
    for y in 0..size {
        let py = y as f64 + 0.5;
        if py < y0 || py >= y0 + h {
            continue;
        }
        for x in 0..size {
            let px = x as f64 + 0.5;
            if px >= x0 && px < x0 + w {
                for (c, v) in color.iter().enumerate() {
                    img.set(y, x, c, *v);
                }
            }
        }
    }
}

fn fill_disc(img: &mut Image, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
    let size = img.width();
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                for (c, v) in color.iter().enumerate() {
                    img.set(y, x, c, *v);
                }
            }
        }
    }
}

fn shapes_image(cfg: &ShapesConfig, rng: &mut ChaCha8Rng) -> (Image, Vec<GroundTruth>) {
    let size = cfg.size;
    let s = size as f64;
    let mut img = background(size, rng);
    let mut labels: Vec<GroundTruth> = Vec::new();
    let targets = rng.gen_range(1..=cfg.max_targets.max(1));
    let distractors = rng.gen_range(0..=cfg.max_distractors);
    let cell_of = |b: &BoundingBox| {
        let (cx, cy) = b.center();
        (
            ((cx * cfg.grid as f64) as usize).min(cfg.grid - 1),
            ((cy * cfg.grid as f64) as usize).min(cfg.grid - 1),
        )
    };
    let free = |b: &BoundingBox, labels: &[GroundTruth]| {
        labels
            .iter()
            .all(|l| l.bbox.intersection(b) == 0.0 && cell_of(&l.bbox) != cell_of(b))
    };
    for k in 0..targets + distractors {
        let class_id = usize::from(k >= targets);
        for _attempt in 0..50 {
            let (w, h) = if class_id == 0 {
                let w = rng.gen_range(0.22..0.36) * s;
                (w, w * rng.gen_range(1.25..1.6))
            } else {
                let d = rng.gen_range(0.22..0.32) * s;
                (d, d)
            };
            let x0 = rng.gen_range(1.0..s - w - 1.0).round();
            let y0 = rng.gen_range(1.0..s - h - 1.0).round();
            let bbox = BoundingBox::new(x0 / s, y0 / s, (x0 + w) / s, ((y0 + h) / s).min(1.0))
                .expect("box inside the image");
            if !free(&bbox, &labels) {
                continue;
            }
            let color = vivid_color(rng);
            if class_id == 0 {
                fill_rect(&mut img, x0, y0, w, h, color);
            } else {
                fill_disc(&mut img, x0 + w / 2.0, y0 + h / 2.0, w / 2.0, color);
            }
            labels.push(GroundTruth { bbox, class_id });
            break;
        }
    }
    for l in labels.iter().filter(|l| l.class_id == 0) {
        if cfg.occlusion_prob > 0.0 && rng.gen_bool(cfg.occlusion_prob) {
            occlude(&mut img, &l.bbox, rng);
        }
    }
    (img, labels)
}

/// Square of side 0.2-0.5 times the box's geometric mean near its center,
/// filled with a flat color or noise.
fn occlude(img: &mut Image, bbox: &BoundingBox, rng: &mut ChaCha8Rng) {
    let s = img.width() as f64;
    let (w, h) = (bbox.width() * s, bbox.height() * s);
    let side = rng.gen_range(0.2..0.5) * (w * h).sqrt();
    let (cx, cy) = bbox.center();
    let cx = cx * s + rng.gen_range(-0.15..0.15) * w;
    let cy = cy * s + rng.gen_range(-0.15..0.15) * h;
    let noise = rng.gen_bool(0.4);
    let flat = [rng.gen(), rng.gen(), rng.gen()];
    let (x0, y0) = (cx - side / 2.0, cy - side / 2.0);
    let size = img.width();
    for y in 0..size {
        let py = y as f64 + 0.5;
        if py < y0 || py >= y0 + side {
            continue;
        }
        for x in 0..size {
            let px = x as f64 + 0.5;
            if px < x0 || px >= x0 + side {
                continue;
            }
            for (c, f) in flat.iter().enumerate() {
                let v = if noise { rng.gen() } else { *f };
                img.set(y, x, c, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = ShapesConfig {
            count: 4,
            ..ShapesConfig::default()
        };
        let a = ShapesDataset::generate(&cfg);
        let b = ShapesDataset::generate(&cfg);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert!(a.labels.iter().all(|l| l.iter().any(|g| g.class_id == 0)));
    }

    #[test]
    fn directory_listing_is_sorted_and_filtered() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.png", "c.txt"] {
            let path = dir.path().join(name);
            if name.ends_with(".png") {
                Image::filled(4, 6, 0.5).save_png(&path).unwrap();
            } else {
                std::fs::write(&path, "x").unwrap();
            }
        }
        std::fs::write(dir.path().join("broken.png"), "not a png").unwrap();
        let ds = ImageDataset::open(dir.path()).unwrap();
        let names: Vec<_> = ds
            .files()
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_owned())
            .collect();
        assert_eq!(names, ["a.png", "b.png", "broken.png"]);
        let (images, failures) = ds.load(8);
        assert_eq!(images.len(), 2);
        assert_eq!(failures.len(), 1);
        assert_eq!((images[0].height(), images[0].width()), (8, 8));
    }
}
