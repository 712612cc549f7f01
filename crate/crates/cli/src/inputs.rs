//! Adapter lookup and image loading shared by the commands.

use std::path::{Path, PathBuf};

use patchattack::dataset::ImageDataset;
use patchattack::detector::{AdapterArgs, AdapterRegistry, DetectorAdapter};
use patchattack::fixture::shapes_images;
use patchattack::image::Image;
use serde_json::Value;

use crate::settings::parse_assignment;
use crate::CliError;

/// Registry from the plugin search path plus any extra directories.
pub fn registry(extra_dirs: &[PathBuf]) -> Result<AdapterRegistry, CliError> {
    let mut reg = AdapterRegistry::from_env();
    for dir in extra_dirs {
        reg.scan_dir(dir)
            .map_err(|e| CliError::usage(format!("--adapter-dir {}: {e}", dir.display())))?;
    }
    Ok(reg)
}

pub fn construct(
    reg: &AdapterRegistry,
    name: &str,
    weights: Option<&Path>,
) -> patchattack::Result<Box<dyn DetectorAdapter>> {
    reg.construct(
        name,
        &AdapterArgs {
            weights: weights.map(Path::to_path_buf),
            device: None,
        },
    )
}

/// Same as [`construct`], but an unknown name is a usage error.
pub fn construct_required(
    reg: &AdapterRegistry,
    name: &str,
    weights: Option<&Path>,
) -> Result<Box<dyn DetectorAdapter>, CliError> {
    construct(reg, name, weights).map_err(|e| match e {
        patchattack::Error::Lookup { .. } => CliError::usage(e.to_string()),
        other => other.into(),
    })
}

/// Images from `data`, or `synthetic` generated shapes images when no
/// directory is given. Images are letterboxed to `size`.
pub fn load_images(
    data: Option<&Path>,
    synthetic: usize,
    size: usize,
    seed: u64,
) -> Result<(Vec<Image>, Vec<String>, String), CliError> {
    match data {
        Some(dir) => {
            let ds = ImageDataset::open(dir).map_err(|e| CliError::usage(e.to_string()))?;
            let (images, failures) = ds.load(size);
            for (path, e) in &failures {
                log::warn!("skipping {}: {e}", path.display());
            }
            let names = ds
                .files()
                .iter()
                .filter(|f| !failures.iter().any(|(p, _)| p == *f))
                .map(|f| {
                    f.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default()
                })
                .collect();
            if images.is_empty() {
                return Err(CliError::Runtime(format!("no readable images in {}", dir.display())));
            }
            Ok((images, names, dir.display().to_string()))
        }
        None if synthetic > 0 => {
            let images = shapes_images(synthetic, size, seed);
            let names = (0..synthetic).map(|i| format!("shapes_{i:04}")).collect();
            Ok((images, names, format!("shapes:{synthetic}:{seed}")))
        }
        None => Err(CliError::usage("no images: set `data` (--data DIR) or `synthetic` (--synthetic N)".into())),
    }
}

/// Collects `--set` assignments followed by the dedicated flags, so a flag
/// wins over a `--set` of the same key.
pub fn overrides(
    sets: &[String],
    flags: impl IntoIterator<Item = (&'static str, Option<Value>)>,
) -> Result<Vec<(String, Value)>, CliError> {
    let mut out = sets.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>, _>>()?;
    out.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_owned(), v))));
    Ok(out)
}

pub fn path_value(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| Value::String(p.display().to_string()))
}
