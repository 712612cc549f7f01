use std::path::PathBuf;

use clap::Args;
use patchattack::config::TrainConfig;
use patchattack::trainer::TrainRun;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::inputs::{self, path_value};
use crate::manifest::Manifest;
use crate::settings::{from_map, resolve_map, to_map};
use crate::{CliError, CommonArgs};

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// White-box adapter name.
    #[arg(long)]
    adapter: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Extra directory of adapter weight files; repeatable.
    #[arg(long = "adapter-dir")]
    adapter_dirs: Vec<PathBuf>,
    /// Directory of training images.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train on this many generated shapes images instead of `--data`.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Start from an existing patch file.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue from `checkpoint.json` in the output directory if present.
    #[arg(long)]
    resume: bool,
}

/// Keys of a train settings file that are not part of the training config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunKeys {
    adapter: String,
    weights: Option<PathBuf>,
    data: Option<PathBuf>,
    synthetic: usize,
    init: Option<PathBuf>,
}

impl Default for RunKeys {
    fn default() -> Self {
        Self {
            adapter: "toy".into(),
            weights: None,
            data: None,
            synthetic: 0,
            init: None,
        }
    }
}

pub const CHECKPOINT: &str = "checkpoint.json";
pub const PATCH_STEM: &str = "patch";
pub const HISTORY: &str = "history.json";

fn resolve(args: &TrainArgs) -> Result<(TrainConfig, RunKeys), CliError> {
    let config_map = to_map(&TrainConfig::default())?;
    let run_map = to_map(&RunKeys::default())?;
    let mut defaults = config_map.clone();
    defaults.extend(run_map.clone());
    let sets = inputs::overrides(
        &args.common.set,
        [
            ("seed", args.common.seed.map(Value::from)),
            ("adapter", args.adapter.clone().map(Value::from)),
            ("weights", path_value(&args.weights)),
            ("data", path_value(&args.data)),
            ("synthetic", args.synthetic.map(Value::from)),
            ("epochs", args.epochs.map(Value::from)),
            ("init", path_value(&args.init)),
        ],
    )?;
    let merged = resolve_map(defaults, args.common.config.as_deref(), &sets)?;
    let (mut cfg, mut run) = (Map::new(), Map::new());
    for (k, v) in merged {
        if run_map.contains_key(&k) {
            run.insert(k, v);
        } else {
            cfg.insert(k, v);
        }
    }
    let config: TrainConfig = from_map(cfg)?;
    config.validate()?;
    Ok((config, from_map(run)?))
}

pub fn run(args: TrainArgs) -> Result<(), CliError> {
    let (config, keys) = resolve(&args)?;
    let out = &args.common.out;
    let reg = inputs::registry(&args.adapter_dirs)?;
    let mut adapter = inputs::construct_required(&reg, &keys.adapter, keys.weights.as_deref())?;
    let (images, _, dataset) = inputs::load_images(
        keys.data.as_deref(),
        keys.synthetic,
        adapter.input_size(),
        config.seed,
    )?;

    let mut settings = to_map(&config)?;
    settings.extend(to_map(&keys)?);
    let mut inputs_list = vec![dataset];
    inputs_list.extend(keys.weights.iter().map(|p| p.display().to_string()));
    inputs_list.extend(keys.init.iter().map(|p| p.display().to_string()));
    let mut manifest = Manifest::start(out, "train", config.seed, Value::Object(settings), inputs_list)?;

    let checkpoint = out.join(CHECKPOINT);
    let mut run = if args.resume && checkpoint.exists() {
        let r = TrainRun::resume(&checkpoint, &config)?;
        log::info!("resuming at epoch {} of {}", r.epoch, config.epochs);
        r
    } else {
        if args.resume {
            log::warn!("no checkpoint at {}; starting fresh", checkpoint.display());
        }
        TrainRun::new(config.clone(), keys.init.as_deref())?
    };
    log::info!(
        "training `{}` for {} epochs on {} images ({:?})",
        adapter.name(),
        config.epochs,
        images.len(),
        config.method
    );
    let ckpt = (config.checkpoint_every > 0).then_some(checkpoint.as_path());
    run.run(adapter.as_mut(), &images, ckpt)?;

    let patch = run.final_patch(&keys.adapter);
    for p in patch.save(&out.join(PATCH_STEM))? {
        manifest.add_output(&p);
    }
    let history = out.join(HISTORY);
    let text = serde_json::to_string_pretty(&run.history).map_err(|e| CliError::Runtime(e.to_string()))?;
    patchattack::fsutil::write_atomic(&history, text.as_bytes())?;
    manifest.add_output(&history);
    if ckpt.is_some() {
        manifest.add_output(&checkpoint);
    }
    let summary = json!({
        "epochs": run.epoch,
        "first_loss": run.history.first_loss(),
        "last_loss": run.history.last_loss(),
        "skipped_batches": run.history.skipped_batches(),
        "final_lr": run.attack.lr,
        "patch_digest": patch.digest(),
        "config_digest": run.config_digest(),
    });
    log::info!(
        "done: loss {:?} -> {:?}, patch {}",
        run.history.first_loss(),
        run.history.last_loss(),
        patch.digest()
    );
    manifest.finish(Some(summary))
}
