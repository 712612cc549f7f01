//! Uniform differentiable detector interface, adapter registry, and the
//! built-in residual toy detector.

mod layers;
mod registry;
mod toy;

pub use layers::{sigmoid, softmax, Conv2d};
pub use registry::{AdapterArgs, AdapterFactory, AdapterRegistry, ADAPTER_PATH_ENV};
pub use toy::{FitConfig, GroundTruth, ToyDetector, ToySpec};

use rand::RngCore;

use crate::detection::{finalize, DetectionSet, PostProcess};
use crate::ensemble::ShakeDropConfig;
use crate::error::Result;
use crate::image::Image;

/// Which output stage `detect` returns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stage {
    /// All candidates above the raw floor, with differentiable confidences.
    Raw,
    /// Thresholded and suppressed; no gradient bookkeeping is implied.
    Final(PostProcess),
}

/// Gradient of a scalar loss with respect to one raw candidate's confidences.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConfidenceGrad {
    pub objectness: f64,
    /// With respect to the emitted `class_score` (the probability of `class_id`).
    pub class_score: f64,
}

/// A detector the attack can differentiate through.
///
/// `forward_raw` records what `backward` needs; `backward` consumes it. When a
/// ShakeDrop configuration is installed, the random source passed to
/// `forward_raw` enables it for that pass; passing `None` always computes the
/// plain network.
pub trait DetectorAdapter: Send {
    fn name(&self) -> &str;

    /// Square input side in pixels.
    fn input_size(&self) -> usize;

    fn class_names(&self) -> &[String];

    /// Number of residual blocks that ShakeDrop can act on.
    fn residual_block_count(&self) -> usize;

    fn shakedrop(&self) -> Option<ShakeDropConfig>;

    fn configure_shakedrop(&mut self, cfg: Option<ShakeDropConfig>);

    fn forward_raw(
        &mut self,
        images: &[Image],
        shake_rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<DetectionSet>>;

    /// Returns one HWC gradient buffer per image of the last forward batch.
    fn backward(
        &mut self,
        grads: &[Vec<ConfidenceGrad>],
        shake_rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<Vec<f64>>>;

    fn box_clone(&self) -> Box<dyn DetectorAdapter>;
}

impl Clone for Box<dyn DetectorAdapter> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Runs the detector without ShakeDrop and returns the requested stage.
pub fn detect(
    adapter: &mut dyn DetectorAdapter,
    images: &[Image],
    stage: Stage,
) -> Result<Vec<DetectionSet>> {
    let raw = adapter.forward_raw(images, None)?;
    Ok(match stage {
        Stage::Raw => raw,
        Stage::Final(params) => raw.iter().map(|r| finalize(r, &params)).collect(),
    })
}

/// Installs or removes ShakeDrop. Returns whether it is active afterwards; an
/// adapter without residual blocks keeps running unmodified.
pub fn set_shakedrop(
    adapter: &mut dyn DetectorAdapter,
    enabled: bool,
    prob: f64,
    range: f64,
) -> Result<bool> {
    if !enabled {
        adapter.configure_shakedrop(None);
        return Ok(false);
    }
    let cfg = ShakeDropConfig {
        prob,
        range,
        ..ShakeDropConfig::default()
    };
    set_shakedrop_config(adapter, Some(cfg))
}

pub fn set_shakedrop_config(
    adapter: &mut dyn DetectorAdapter,
    cfg: Option<ShakeDropConfig>,
) -> Result<bool> {
    let Some(cfg) = cfg else {
        adapter.configure_shakedrop(None);
        return Ok(false);
    };
    cfg.validate()?;
    if adapter.residual_block_count() == 0 {
        log::warn!(
            "adapter `{}` exposes no residual blocks; ShakeDrop disabled",
            adapter.name()
        );
        adapter.configure_shakedrop(None);
        return Ok(false);
    }
    adapter.configure_shakedrop(Some(cfg));
    Ok(true)
}
