//! A ready-made synthetic setting: toy detectors briefly fitted on the shapes
//! dataset, and fresh image sets to attack.

use crate::dataset::{ShapesConfig, ShapesDataset};
use crate::detector::{FitConfig, ToyDetector, ToySpec};
use crate::error::Result;
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub detector: ToySpec,
    /// Seed of the fitting images and of the fitting shuffle.
    pub data_seed: u64,
    pub images: usize,
    pub epochs: usize,
    /// Occluder probability in the fitting images. Without occluders the
    /// detector loses any object whose center is covered, patch or not.
    pub occlusion_prob: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            detector: ToySpec::default(),
            data_seed: 1,
            images: 192,
            epochs: 60,
            occlusion_prob: 0.7,
        }
    }
}

pub fn fit_toy(name: &str, spec: &FixtureSpec) -> Result<ToyDetector> {
    let data = ShapesDataset::generate(&ShapesConfig {
        count: spec.images,
        size: spec.detector.input_size,
        occlusion_prob: spec.occlusion_prob,
        seed: spec.data_seed,
        ..ShapesConfig::default()
    });
    let mut det = ToyDetector::new(name, spec.detector.clone())?;
    let losses = det.fit(
        &data.images,
        &data.labels,
        &FitConfig {
            epochs: spec.epochs,
            seed: spec.data_seed,
            ..FitConfig::default()
        },
    )?;
    log::info!("fitted `{name}`: final loss {:?}", losses.last());
    Ok(det)
}

/// Unoccluded shapes images at `size`.
pub fn shapes_images(count: usize, size: usize, seed: u64) -> Vec<Image> {
    ShapesDataset::generate(&ShapesConfig {
        count,
        size,
        seed,
        ..ShapesConfig::default()
    })
    .images
}
