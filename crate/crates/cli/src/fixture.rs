use clap::Args;
use patchattack::detector::ToySpec;
use patchattack::fixture::{fit_toy, shapes_images, FixtureSpec};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::inputs;
use crate::manifest::Manifest;
use crate::settings::resolve;
use crate::{CliError, CommonArgs};

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of shapes images to write.
    #[arg(long)]
    images: Option<usize>,
    /// Fitting epochs for each toy detector.
    #[arg(long = "fit-epochs")]
    fit_epochs: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FixtureSettings {
    images: usize,
    image_size: usize,
    fit_images: usize,
    fit_epochs: usize,
    occlusion_prob: f64,
    seed: u64,
}

impl Default for FixtureSettings {
    fn default() -> Self {
        let f = FixtureSpec::default();
        Self {
            images: 64,
            image_size: f.detector.input_size,
            fit_images: f.images,
            fit_epochs: f.epochs,
            occlusion_prob: f.occlusion_prob,
            seed: 0,
        }
    }
}

/// Writes `images/` (shapes PNGs) and `adapters/toy-a.json`, `adapters/toy-b.json`.
/// The two detectors share fitting data and differ in width and init seed.
pub fn run(args: FixtureArgs) -> Result<(), CliError> {
    let sets = inputs::overrides(
        &args.common.set,
        [
            ("seed", args.common.seed.map(Value::from)),
            ("images", args.images.map(Value::from)),
            ("fit_epochs", args.fit_epochs.map(Value::from)),
        ],
    )?;
    let s: FixtureSettings = resolve(&FixtureSettings::default(), args.common.config.as_deref(), &sets)?;
    if s.image_size < 8 || s.image_size % 8 != 0 {
        return Err(CliError::usage(format!("image_size must be a positive multiple of 8, got {}", s.image_size)));
    }
    let out = &args.common.out;
    let settings = serde_json::to_value(&s).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut manifest = Manifest::start(out, "fixture", s.seed, settings, Vec::new())?;

    let dir = out.join("images");
    for (i, img) in shapes_images(s.images, s.image_size, s.seed).iter().enumerate() {
        let path = dir.join(format!("shapes_{i:04}.png"));
        img.save_png(&path)?;
    }
    manifest.add_output(&dir);

    let variants = [("toy-a", 8, 0), ("toy-b", 12, 5)];
    for (name, width, seed) in variants {
        let spec = FixtureSpec {
            detector: ToySpec {
                input_size: s.image_size,
                width,
                seed,
                ..ToySpec::default()
            },
            data_seed: s.seed.wrapping_add(1),
            images: s.fit_images,
            epochs: s.fit_epochs,
            occlusion_prob: s.occlusion_prob,
        };
        log::info!("fitting `{name}` ({} epochs)", s.fit_epochs);
        let det = fit_toy(name, &spec)?;
        let path = out.join("adapters").join(format!("{name}.json"));
        det.save(&path)?;
        manifest.add_output(&path);
    }
    manifest.finish(Some(json!({ "images": s.images })))
}
