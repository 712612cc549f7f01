//! The patch optimization loop, its history and checkpoints.

use std::path::Path;
use std::time::Instant;

use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::applier::{apply_patch, patch_gradient, ApplyOptions, CutoutSettings};
use crate::attack::{
    attack_step, detection_loss, tv_loss_and_grad, AttackState, SchedulerState, StepOutcome,
};
use crate::config::TrainConfig;
use crate::detection::PostProcess;
use crate::detector::{detect, set_shakedrop_config, DetectorAdapter, Stage};
use crate::ensemble::augment;
use crate::error::{Error, Result};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::image::Image;
use crate::patch::{AdversarialPatch, InitMode};

const CHECKPOINT_FORMAT: &str = "patchattack-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean detection loss over the epoch's non-skipped batches.
    pub det_loss: Option<f64>,
    pub tv_loss: Option<f64>,
    /// Step size used during the epoch.
    pub lr: f64,
    pub lr_decayed: bool,
    pub batches: usize,
    pub skipped_batches: usize,
    pub placements: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.det_loss)
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.iter().find_map(|e| e.det_loss)
    }

    pub fn skipped_batches(&self) -> usize {
        self.epochs.iter().map(|e| e.skipped_batches).sum()
    }
}

/// Independent random streams so that toggling one component does not shift
/// the draws of another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Streams {
    data: ChaCha8Rng,
    shake: ChaCha8Rng,
    place: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// A training run in progress. Everything needed to continue bit-identically
/// lives here and in the checkpoint written from it.
#[derive(Debug, Clone)]
pub struct TrainRun {
    config: TrainConfig,
    config_digest: String,
    pub patch: AdversarialPatch,
    pub attack: AttackState,
    pub scheduler: SchedulerState,
    pub history: TrainHistory,
    /// Completed epochs.
    pub epoch: usize,
    streams: Streams,
}

impl TrainRun {
    /// Validates `config` and initializes the patch. `init_from` seeds the
    /// patch from an existing file instead of `config.patch_init`.
    pub fn new(config: TrainConfig, init_from: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let mut init_rng = stream(config.seed, 0);
        let mode = if init_from.is_some() {
            InitMode::FromFile
        } else {
            config.patch_init
        };
        let patch = AdversarialPatch::init(
            config.patch_height,
            config.patch_width,
            mode,
            init_from,
            &mut init_rng,
        )?;
        let attack = AttackState::new(config.attack_params(), config.seed ^ 0x5eed_a77a);
        let scheduler = SchedulerState::new(config.initial_lr, config.scheduler_params());
        Ok(Self {
            config_digest: config.digest(),
            streams: Streams {
                data: stream(config.seed, 1),
                shake: stream(config.seed, 2),
                place: stream(config.seed, 3),
            },
            config,
            patch,
            attack,
            scheduler,
            history: TrainHistory::default(),
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn apply_options(&self) -> ApplyOptions {
        let c = &self.config;
        ApplyOptions {
            scale: c.patch_scale,
            target_class: c.target_class,
            side_mode: c.side_mode,
            jitter: c.pose_jitter.then_some(c.jitter),
            cutout: c.cutout.then_some(CutoutSettings {
                prob: c.cutout_prob,
                ratio: c.cutout_ratio,
                fill: c.cutout_fill,
            }),
        }
    }

    /// Runs up to `epochs` more epochs (bounded by `epochs`).
    pub fn run_epochs(
        &mut self,
        adapter: &mut dyn DetectorAdapter,
        images: &[Image],
        epochs: usize,
    ) -> Result<()> {
        if images.is_empty() {
            return Err(Error::Argument("training needs at least one image".into()));
        }
        let size = adapter.input_size();
        if let Some(bad) = images.iter().find(|im| im.height() != size || im.width() != size) {
            return Err(Error::shape(
                format!("{size}x{size} images"),
                format!("{}x{}", bad.height(), bad.width()),
            ));
        }
        let shake_cfg = self.config.shakedrop.then(|| self.config.shakedrop_config());
        let previous = adapter.shakedrop();
        let shake_on = set_shakedrop_config(adapter, shake_cfg)?;
        let result = (|| {
            for _ in 0..epochs {
                if self.is_finished() {
                    break;
                }
                self.run_epoch(adapter, images, shake_on)?;
            }
            Ok(())
        })();
        adapter.configure_shakedrop(previous);
        result
    }

    fn run_epoch(
        &mut self,
        adapter: &mut dyn DetectorAdapter,
        images: &[Image],
        shake_on: bool,
    ) -> Result<()> {
        let started = Instant::now();
        let opts = self.apply_options();
        let c = self.config.clone();
        let lr = self.attack.lr;
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut self.streams.data);
        let (mut det_sum, mut tv_sum, mut used, mut skipped, mut placed) = (0.0, 0.0, 0, 0, 0);
        let batches: Vec<&[usize]> = order.chunks(c.batch_size).collect();
        for idx in &batches {
            let batch: Vec<Image> = idx
                .iter()
                .map(|&i| {
                    if c.augmentation {
                        augment(&images[i], &c.augmentation_policy, &mut self.streams.data)
                    } else {
                        images[i].clone()
                    }
                })
                .collect();
            let clean = detect(adapter, &batch, Stage::Final(PostProcess::default()))?;
            let patch_img = self.patch.to_image();
            let patched = apply_patch(&batch, &clean, &patch_img, &opts, &mut self.streams.place)?;
            if patched.placements() == 0 {
                skipped += 1;
                continue;
            }
            placed += patched.placements();
            let shake = shake_on.then_some(&mut self.streams.shake as &mut dyn rand::RngCore);
            let raw = adapter.forward_raw(&patched.images, shake)?;
            let loss = detection_loss(&raw, c.target_class, c.reduction, c.confidence);
            if loss.no_signal {
                skipped += 1;
                continue;
            }
            let shake = shake_on.then_some(&mut self.streams.shake as &mut dyn rand::RngCore);
            let image_grads = adapter.backward(&loss.grads, shake)?;
            let mut grad = patch_gradient(&patched, &patch_img, &image_grads)?;
            let (tv, tv_grad) =
                tv_loss_and_grad(patch_img.data(), patch_img.height(), patch_img.width())?;
            for (g, t) in grad.iter_mut().zip(&tv_grad) {
                *g += c.tv_weight * t;
            }
            match attack_step(&mut self.patch, &grad, &mut self.attack)? {
                StepOutcome::Applied => {
                    det_sum += loss.value;
                    tv_sum += tv;
                    used += 1;
                }
                StepOutcome::SkippedNonFinite => skipped += 1,
            }
        }
        self.epoch += 1;
        let det_loss = (used > 0).then(|| det_sum / used as f64);
        let mut decayed = false;
        match det_loss {
            Some(l) => {
                decayed = self.scheduler.update(l);
                self.attack.lr = self.scheduler.lr;
            }
            None => log::warn!("epoch {}: every batch was skipped", self.epoch),
        }
        let rec = EpochRecord {
            epoch: self.epoch,
            det_loss,
            tv_loss: (used > 0).then(|| tv_sum / used as f64),
            lr,
            lr_decayed: decayed,
            batches: batches.len(),
            skipped_batches: skipped,
            placements: placed,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} det_loss {:?} lr {:.3e} skipped {}/{}",
            rec.epoch,
            rec.det_loss,
            rec.lr,
            rec.skipped_batches,
            rec.batches
        );
        self.history.epochs.push(rec);
        Ok(())
    }

    /// Runs to completion, checkpointing to `checkpoint` every
    /// `config.checkpoint_every` epochs when a path is given.
    pub fn run(
        &mut self,
        adapter: &mut dyn DetectorAdapter,
        images: &[Image],
        checkpoint: Option<&Path>,
    ) -> Result<()> {
        let every = self.config.checkpoint_every;
        while !self.is_finished() {
            let n = match (checkpoint, every) {
                (Some(_), e) if e > 0 => e,
                _ => self.config.epochs - self.epoch,
            };
            self.run_epochs(adapter, images, n)?;
            if let (Some(path), true) = (checkpoint, every > 0) {
                self.save_checkpoint(path)?;
            }
        }
        Ok(())
    }

    /// The current patch with provenance filled in.
    pub fn final_patch(&self, white_box: &str) -> AdversarialPatch {
        let mut p = self.patch.clone();
        p.meta.mode = "trained".into();
        p.meta.config_digest = Some(self.config_digest.clone());
        p.meta.epoch = Some(self.epoch);
        p.meta.white_box = Some(white_box.to_owned());
        p.meta.digest = Some(p.digest());
        p
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let payload = Payload {
            config: self.config.clone(),
            config_digest: self.config_digest.clone(),
            epoch: self.epoch,
            patch: base64::engine::general_purpose::STANDARD.encode(self.patch.sidecar_bytes()),
            patch_meta: self.patch.meta.clone(),
            attack: self.attack.clone(),
            scheduler: self.scheduler.clone(),
            history: self.history.clone(),
            streams: self.streams.clone(),
        };
        let body = serde_json::to_string(&payload)?;
        let archive = Archive {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            sha256: sha256_hex(body.as_bytes()),
            payload: body,
        };
        write_atomic(path, serde_json::to_string(&archive)?.as_bytes())
    }

    /// Restores a run. The checkpoint must have been written for a config
    /// with the same digest as `config`.
    pub fn resume(path: &Path, config: &TrainConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Integrity(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        let archive: Archive = serde_json::from_str(&text)
            .map_err(|e| Error::Integrity(format!("{}: not a checkpoint: {e}", path.display())))?;
        if archive.format != CHECKPOINT_FORMAT || archive.version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                archive.format,
                archive.version
            )));
        }
        if sha256_hex(archive.payload.as_bytes()) != archive.sha256 {
            return Err(Error::Integrity(format!("{}: checksum mismatch", path.display())));
        }
        let p: Payload = serde_json::from_str(&archive.payload)
            .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
        let digest = config.digest();
        if p.config_digest != digest || p.config.digest() != digest {
            return Err(Error::Config(format!(
                "checkpoint {} was written for config {}, not {}",
                path.display(),
                p.config_digest,
                digest
            )));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&p.patch)
            .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
        let mut patch = AdversarialPatch::from_sidecar_bytes(&bytes, path)?;
        patch.meta = p.patch_meta;
        Ok(Self {
            config: p.config,
            config_digest: p.config_digest,
            patch,
            attack: p.attack,
            scheduler: p.scheduler,
            history: p.history,
            epoch: p.epoch,
            streams: p.streams,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Archive {
    format: String,
    version: u32,
    sha256: String,
    payload: String,
}

#[derive(Serialize, Deserialize)]
struct Payload {
    config: TrainConfig,
    config_digest: String,
    epoch: usize,
    patch: String,
    patch_meta: crate::patch::PatchMeta,
    attack: AttackState,
    scheduler: SchedulerState,
    history: TrainHistory,
    streams: Streams,
}

/// Trains a patch against `adapter` on `images` from scratch.
pub fn train(
    config: &TrainConfig,
    adapter: &mut dyn DetectorAdapter,
    images: &[Image],
) -> Result<TrainRun> {
    let mut run = TrainRun::new(config.clone(), None)?;
    run.run(adapter, images, None)?;
    Ok(run)
}
