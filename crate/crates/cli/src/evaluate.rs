use std::collections::HashSet;
use std::path::PathBuf;

use clap::Args;
use patchattack::applier::SideMode;
use patchattack::detection::PostProcess;
use patchattack::eval::{control_patches, transfer_matrix, Column, EvalOptions};
use patchattack::fsutil::write_atomic;
use patchattack::patch::AdversarialPatch;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::inputs::{self, path_value};
use crate::manifest::Manifest;
use crate::settings::resolve;
use crate::{chart, CliError, CommonArgs};

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Patch file (any of the .patch/.png/.json triple); repeatable.
    #[arg(long = "patch")]
    patches: Vec<PathBuf>,
    /// Adapter column; repeatable.
    #[arg(long = "adapter")]
    adapters: Vec<String>,
    #[arg(long = "adapter-dir")]
    adapter_dirs: Vec<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    synthetic: Option<usize>,
    /// Add gray, random and white control rows.
    #[arg(long)]
    controls: bool,
    /// IoU threshold for matching predictions to clean detections.
    #[arg(long = "iou-thr")]
    iou_thr: Option<f64>,
    /// Score every class, not only the target class.
    #[arg(long = "all-classes")]
    all_classes: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSettings {
    patches: Vec<PathBuf>,
    adapters: Vec<String>,
    data: Option<PathBuf>,
    synthetic: usize,
    controls: bool,
    /// Side of the control patches when no patch file is given.
    control_side: usize,
    patch_scale: f64,
    side_mode: SideMode,
    target_class: usize,
    iou_thr: f64,
    all_classes: bool,
    post: PostProcess,
    seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self {
            patches: Vec::new(),
            adapters: Vec::new(),
            data: None,
            synthetic: 0,
            controls: false,
            control_side: 300,
            patch_scale: o.patch_scale,
            side_mode: o.side_mode,
            target_class: o.target_class,
            iou_thr: o.iou_thr,
            all_classes: o.all_classes,
            post: o.post,
            seed: 0,
        }
    }
}

impl EvalSettings {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            patch_scale: self.patch_scale,
            side_mode: self.side_mode,
            target_class: self.target_class,
            iou_thr: self.iou_thr,
            all_classes: self.all_classes,
            post: self.post,
        }
    }
}

fn list_value<T: Serialize>(items: &[T]) -> Option<Value> {
    (!items.is_empty()).then(|| serde_json::to_value(items).expect("plain list"))
}

fn unique_id(stem: String, taken: &mut HashSet<String>) -> String {
    let mut id = stem.clone();
    let mut n = 2;
    while !taken.insert(id.clone()) {
        id = format!("{stem}_{n}");
        n += 1;
    }
    id
}

pub fn run(args: EvaluateArgs) -> Result<(), CliError> {
    let sets = inputs::overrides(
        &args.common.set,
        [
            ("seed", args.common.seed.map(Value::from)),
            ("patches", list_value(&args.patches)),
            ("adapters", list_value(&args.adapters)),
            ("data", path_value(&args.data)),
            ("synthetic", args.synthetic.map(Value::from)),
            ("controls", args.controls.then_some(Value::Bool(true))),
            ("iou_thr", args.iou_thr.map(Value::from)),
            ("all_classes", args.all_classes.then_some(Value::Bool(true))),
        ],
    )?;
    let s: EvalSettings = resolve(&EvalSettings::default(), args.common.config.as_deref(), &sets)?;
    if s.adapters.is_empty() {
        return Err(CliError::usage("no adapters to evaluate; pass --adapter NAME".into()));
    }
    if !(s.iou_thr > 0.0 && s.iou_thr <= 1.0) {
        return Err(CliError::usage(format!("iou_thr must be in (0, 1], got {}", s.iou_thr)));
    }
    if s.patches.is_empty() && !s.controls {
        return Err(CliError::usage("nothing to evaluate; pass --patch or --controls".into()));
    }

    let mut taken = HashSet::new();
    let mut patches = Vec::new();
    for path in &s.patches {
        let p = AdversarialPatch::load(path)?;
        let stem = path
            .file_stem()
            .map(|x| x.to_string_lossy().into_owned())
            .unwrap_or_else(|| "patch".into());
        patches.push((unique_id(stem, &mut taken), p));
    }
    if s.controls {
        let (h, w) = patches
            .first()
            .map(|(_, p)| (p.height(), p.width()))
            .unwrap_or((s.control_side, s.control_side));
        for (id, p) in control_patches(h, w, s.seed)? {
            patches.push((unique_id(id, &mut taken), p));
        }
    }

    let reg = inputs::registry(&args.adapter_dirs)?;
    let columns: Vec<Column> = s
        .adapters
        .iter()
        .map(|name| Column {
            name: name.clone(),
            adapter: inputs::construct(&reg, name, None),
        })
        .collect();
    // Images are decoded once at the largest input size; each column
    // letterboxes them again to its own size.
    let size = columns
        .iter()
        .filter_map(|c| c.adapter.as_ref().ok().map(|a| a.input_size()))
        .max()
        .unwrap_or(64);
    let (images, _, dataset) = inputs::load_images(s.data.as_deref(), s.synthetic, size, s.seed)?;

    let out = &args.common.out;
    let settings = serde_json::to_value(&s).map_err(|e| CliError::Runtime(e.to_string()))?;
    let inputs_list = std::iter::once(dataset.clone())
        .chain(s.patches.iter().map(|p| p.display().to_string()))
        .collect();
    let mut manifest = Manifest::start(out, "evaluate", s.seed, settings, inputs_list)?;

    let report = transfer_matrix(&patches, columns, &images, &dataset, &s.options())?;
    let files = [
        ("report.csv", report.to_csv()?),
        ("report.json", report.to_json()?),
        ("report.txt", report.to_text()),
    ];
    for (name, text) in files {
        let path = out.join(name);
        write_atomic(&path, text.as_bytes())?;
        manifest.add_output(&path);
    }
    let png = out.join("report.png");
    chart::bar_chart(&report).save_png(&png)?;
    manifest.add_output(&png);
    print!("{}", report.to_text());
    manifest.finish(Some(json!({
        "rows": report.rows.len(),
        "columns": report.columns,
        "images": images.len(),
    })))
}
