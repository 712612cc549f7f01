use std::path::PathBuf;

use clap::Args;
use patchattack::applier::{apply_patch, ApplyOptions, SideMode};
use patchattack::detection::{DetectionSet, PostProcess};
use patchattack::detector::{detect, Stage};
use patchattack::fsutil::write_atomic;
use patchattack::image::Image;
use patchattack::patch::AdversarialPatch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::inputs::{self, path_value};
use crate::manifest::Manifest;
use crate::settings::resolve;
use crate::{CliError, CommonArgs};

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    patch: Option<PathBuf>,
    #[arg(long)]
    adapter: Option<String>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long = "adapter-dir")]
    adapter_dirs: Vec<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    synthetic: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ApplySettings {
    patch: Option<PathBuf>,
    adapter: String,
    weights: Option<PathBuf>,
    data: Option<PathBuf>,
    synthetic: usize,
    patch_scale: f64,
    side_mode: SideMode,
    target_class: usize,
    post: PostProcess,
    seed: u64,
}

impl Default for ApplySettings {
    fn default() -> Self {
        Self {
            patch: None,
            adapter: "toy".into(),
            weights: None,
            data: None,
            synthetic: 0,
            patch_scale: 0.15,
            side_mode: SideMode::GeometricMean,
            target_class: 0,
            post: PostProcess::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize)]
struct ImageSummary {
    image: String,
    clean: usize,
    patched: usize,
    clean_target: usize,
    patched_target: usize,
    placements: usize,
}

const CLEAN_BOX: [f64; 3] = [0.1, 0.8, 0.1];
const PATCHED_BOX: [f64; 3] = [0.9, 0.1, 0.1];

fn draw_boxes(img: &mut Image, dets: &DetectionSet, rgb: [f64; 3]) {
    let (h, w) = (img.height() as f64, img.width() as f64);
    for d in &dets.detections {
        let b = d.bbox;
        // Boxes are normalized; map them to pixel edges.
        let px = |v: f64, len: f64| (v * len).clamp(0.0, len - 1.0).round() as usize;
        let (x0, x1) = (px(b.x1, w), px(b.x2, w));
        let (y0, y1) = (px(b.y1, h), px(b.y2, h));
        let mut put = |y: usize, x: usize| {
            for (c, v) in rgb.iter().enumerate() {
                img.set(y, x, c, *v);
            }
        };
        for x in x0..=x1 {
            put(y0, x);
            put(y1, x);
        }
        for y in y0..=y1 {
            put(y, x0);
            put(y, x1);
        }
    }
}

pub fn run(args: ApplyArgs) -> Result<(), CliError> {
    let sets = inputs::overrides(
        &args.common.set,
        [
            ("seed", args.common.seed.map(Value::from)),
            ("patch", path_value(&args.patch)),
            ("adapter", args.adapter.clone().map(Value::from)),
            ("weights", path_value(&args.weights)),
            ("data", path_value(&args.data)),
            ("synthetic", args.synthetic.map(Value::from)),
        ],
    )?;
    let s: ApplySettings = resolve(&ApplySettings::default(), args.common.config.as_deref(), &sets)?;
    let Some(patch_path) = s.patch.clone() else {
        return Err(CliError::usage("no patch given; pass --patch FILE".into()));
    };
    if !(s.patch_scale > 0.0) {
        return Err(CliError::usage(format!("patch_scale must be positive, got {}", s.patch_scale)));
    }
    let patch = AdversarialPatch::load(&patch_path)?;
    let reg = inputs::registry(&args.adapter_dirs)?;
    let mut adapter = inputs::construct_required(&reg, &s.adapter, s.weights.as_deref())?;
    let (images, names, dataset) =
        inputs::load_images(s.data.as_deref(), s.synthetic, adapter.input_size(), s.seed)?;

    let out = &args.common.out;
    let settings = serde_json::to_value(&s).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut manifest = Manifest::start(
        out,
        "apply",
        s.seed,
        settings,
        vec![dataset, patch_path.display().to_string()],
    )?;

    let stage = Stage::Final(s.post);
    let clean = detect(adapter.as_mut(), &images, stage)?;
    let opts = ApplyOptions {
        side_mode: s.side_mode,
        ..ApplyOptions::plain(s.patch_scale, s.target_class)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let batch = apply_patch(&images, &clean, &patch.to_image(), &opts, &mut rng)?;
    let patched = detect(adapter.as_mut(), &batch.images, stage)?;

    let dir = out.join("images");
    let mut rows = Vec::with_capacity(images.len());
    for (i, name) in names.iter().enumerate() {
        let mut left = images[i].clone();
        let mut right = batch.images[i].clone();
        draw_boxes(&mut left, &clean[i], CLEAN_BOX);
        draw_boxes(&mut right, &patched[i], PATCHED_BOX);
        let path = dir.join(format!("{name}.png"));
        left.side_by_side(&right).save_png(&path)?;
        manifest.add_output(&path);
        rows.push(ImageSummary {
            image: name.clone(),
            clean: clean[i].len(),
            patched: patched[i].len(),
            clean_target: clean[i].of_class(s.target_class).count(),
            patched_target: patched[i].of_class(s.target_class).count(),
            placements: batch.placements_in(i),
        });
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let csv_bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    let csv_path = out.join("summary.csv");
    write_atomic(&csv_path, &csv_bytes)?;
    manifest.add_output(&csv_path);

    let clean_total: usize = rows.iter().map(|r| r.clean_target).sum();
    let patched_total: usize = rows.iter().map(|r| r.patched_target).sum();
    let summary = json!({
        "images": rows.len(),
        "placements": batch.placements(),
        "skipped": batch.skipped,
        "clean_target_detections": clean_total,
        "patched_target_detections": patched_total,
        "per_image": rows,
    });
    let json_path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(&json_path, text.as_bytes())?;
    manifest.add_output(&json_path);
    println!(
        "{} images: {clean_total} target detections clean, {patched_total} patched",
        rows.len()
    );
    manifest.finish(Some(json!({
        "images": rows.len(),
        "clean_target_detections": clean_total,
        "patched_target_detections": patched_total,
    })))
}
