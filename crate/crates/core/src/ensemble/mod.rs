//! Self-ensemble strategies: constrained data augmentation (data), ShakeDrop
//! (model) and cutout (patch).

pub mod augment;
pub mod cutout;
pub mod shakedrop;

pub use augment::{augment, AugmentationPolicy};
pub use cutout::{cutout, cutout_region, maybe_cutout, CutoutRegion, PatchView};
pub use shakedrop::{
    mix_factor, shakedrop_backward, shakedrop_forward, ShakeDropConfig, ShakeDropGate,
    ShakeDropGranularity, ShakeDropSample,
};
