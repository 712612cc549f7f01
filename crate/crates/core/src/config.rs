//! Training configuration with validated defaults.

use serde::{Deserialize, Serialize};

use crate::applier::{PoseJitter, SideMode};
use crate::attack::{AttackMethod, AttackParams, ConfidenceReduction, SchedulerParams};
use crate::detection::ConfidenceKind;
use crate::ensemble::{AugmentationPolicy, ShakeDropConfig, ShakeDropGranularity};
use crate::error::{Error, Result};
use crate::fsutil::sha256_hex;
use crate::patch::InitMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub patch_init: InitMode,
    /// Patch side relative to the target box.
    pub patch_scale: f64,
    pub side_mode: SideMode,
    pub target_class: usize,

    pub method: AttackMethod,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub plateau_abs: f64,
    pub plateau_rel: f64,
    /// Use the signed loss change for the plateau test.
    pub plateau_signed: bool,
    pub mim_decay: f64,
    pub pgd_init_radius: Option<f64>,

    pub tv_weight: f64,
    pub confidence: ConfidenceKind,
    pub reduction: ConfidenceReduction,

    pub augmentation: bool,
    pub augmentation_policy: AugmentationPolicy,
    pub shakedrop: bool,
    pub shakedrop_prob: f64,
    pub shakedrop_range: f64,
    pub shakedrop_granularity: ShakeDropGranularity,
    pub cutout: bool,
    pub cutout_prob: f64,
    pub cutout_ratio: f64,
    pub cutout_fill: f64,
    pub pose_jitter: bool,
    pub jitter: PoseJitter,

    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 8,
            patch_height: 300,
            patch_width: 300,
            patch_init: InitMode::Random,
            patch_scale: 0.15,
            side_mode: SideMode::GeometricMean,
            target_class: 0,
            method: AttackMethod::Adam,
            initial_lr: 0.03,
            lr_decay: 0.5,
            lr_floor: 1e-6,
            plateau_abs: 1e-4,
            plateau_rel: 1e-4,
            plateau_signed: false,
            mim_decay: 1.0,
            pgd_init_radius: None,
            tv_weight: 2.5,
            confidence: ConfidenceKind::Objectness,
            reduction: ConfidenceReduction::MeanAll,
            augmentation: true,
            augmentation_policy: AugmentationPolicy::default(),
            shakedrop: true,
            shakedrop_prob: 0.5,
            shakedrop_range: 1.0,
            shakedrop_granularity: ShakeDropGranularity::Scalar,
            cutout: true,
            cutout_prob: 0.9,
            cutout_ratio: 0.4,
            cutout_fill: 0.5,
            pose_jitter: true,
            jitter: PoseJitter::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// The plain baseline: no input augmentation, no ShakeDrop, no cutout.
    pub fn baseline() -> Self {
        Self {
            augmentation: false,
            shakedrop: false,
            cutout: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.patch_height == 0 || self.patch_width == 0 {
            return bad("patch size must be at least 1x1".into());
        }
        if self.patch_init == InitMode::FromFile {
            return bad("patch_init `from_file` is set through the command line".into());
        }
        if !(self.patch_scale > 0.0 && self.patch_scale <= 1.0) {
            return bad(format!("patch_scale {} not in (0,1]", self.patch_scale));
        }
        for (name, v) in [
            ("initial_lr", self.initial_lr),
            ("lr_floor", self.lr_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad(format!("lr_decay {} not in (0,1)", self.lr_decay));
        }
        for (name, v) in [
            ("plateau_abs", self.plateau_abs),
            ("plateau_rel", self.plateau_rel),
            ("tv_weight", self.tv_weight),
            ("mim_decay", self.mim_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if let Some(r) = self.pgd_init_radius {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("pgd_init_radius {r} not in [0,1]"));
            }
        }
        if self.augmentation {
            self.augmentation_policy.validate()?;
        }
        if self.shakedrop {
            self.shakedrop_config().validate()?;
        }
        if self.cutout {
            if !(0.0..=1.0).contains(&self.cutout_prob) {
                return bad(format!("cutout_prob {} not in [0,1]", self.cutout_prob));
            }
            if !(self.cutout_ratio > 0.0 && self.cutout_ratio <= 1.0) {
                return bad(format!("cutout_ratio {} not in (0,1]", self.cutout_ratio));
            }
            if !(0.0..=1.0).contains(&self.cutout_fill) {
                return bad(format!("cutout_fill {} not in [0,1]", self.cutout_fill));
            }
        }
        if self.pose_jitter {
            let j = &self.jitter;
            if !(j.rotation_deg >= 0.0
                && j.brightness >= 0.0
                && j.contrast.0 > 0.0
                && j.contrast.0 <= j.contrast.1
                && (0.0..=1.0).contains(&j.center_shift))
            {
                return bad(format!("invalid pose jitter {j:?}"));
            }
        }
        Ok(())
    }

    pub fn shakedrop_config(&self) -> ShakeDropConfig {
        ShakeDropConfig {
            prob: self.shakedrop_prob,
            range: self.shakedrop_range,
            granularity: self.shakedrop_granularity,
        }
    }

    pub fn attack_params(&self) -> AttackParams {
        AttackParams {
            method: self.method,
            lr: self.initial_lr,
            mim_decay: self.mim_decay,
            pgd_init_radius: self.pgd_init_radius,
            ..AttackParams::default()
        }
    }

    pub fn scheduler_params(&self) -> SchedulerParams {
        SchedulerParams {
            decay: self.lr_decay,
            eps_abs: self.plateau_abs,
            eps_rel: self.plateau_rel,
            floor: self.lr_floor,
            signed: self.plateau_signed,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::baseline().validate().unwrap();
    }

    #[test]
    fn digest_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn bad_values_are_rejected() {
        let cases = [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                patch_scale: 1.5,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr_decay: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                cutout_ratio: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                shakedrop_prob: 2.0,
                ..TrainConfig::default()
            },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn json_round_trip() {
        let c = TrainConfig {
            method: AttackMethod::Mim,
            pgd_init_radius: Some(0.1),
            ..TrainConfig::default()
        };
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
