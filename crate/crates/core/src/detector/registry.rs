use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::toy::{ToyDetector, ToySpec};
use super::DetectorAdapter;
use crate::error::{Error, Result};

/// Environment variable listing directories (`:`-separated) searched for
/// `<name>.json` adapter weight files.
pub const ADAPTER_PATH_ENV: &str = "PATCHATTACK_ADAPTER_PATH";

/// Arguments handed to an adapter factory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterArgs {
    pub weights: Option<PathBuf>,
    pub device: Option<String>,
}

pub type AdapterFactory =
    Arc<dyn Fn(&AdapterArgs) -> Result<Box<dyn DetectorAdapter>> + Send + Sync>;

/// Named adapter factories.
#[derive(Clone, Default)]
pub struct AdapterRegistry {
    factories: BTreeMap<String, AdapterFactory>,
}

impl std::fmt::Debug for AdapterRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding the built-in `toy` adapter. Without a weights path it
    /// uses seed-0 random weights; with one it loads a saved toy detector.
    pub fn with_builtin() -> Self {
        let mut reg = Self::new();
        reg.register("toy", Arc::new(|args: &AdapterArgs| {
            let det = match &args.weights {
                Some(path) => {
                    let mut d = ToyDetector::load(path)?;
                    d.set_name("toy");
                    d
                }
                None => ToyDetector::new("toy", ToySpec::default())?,
            };
            Ok(Box::new(det) as Box<dyn DetectorAdapter>)
        }))
        .expect("fresh registry");
        reg
    }

    /// Built-ins plus every weights file found on the plugin search path.
    pub fn from_env() -> Self {
        let mut reg = Self::with_builtin();
        if let Ok(paths) = std::env::var(ADAPTER_PATH_ENV) {
            for dir in std::env::split_paths(&paths) {
                if let Err(e) = reg.scan_dir(&dir) {
                    log::warn!("skipping adapter directory {}: {e}", dir.display());
                }
            }
        }
        reg
    }

    /// Registers every `<name>.json` toy weights file in `dir` as adapter `<name>`.
    /// Names that are already taken are skipped with a warning.
    pub fn scan_dir(&mut self, dir: &Path) -> Result<usize> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut added = 0;
        for path in files {
            let Some(name) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
                continue;
            };
            let weights = path.clone();
            let adapter_name = name.clone();
            let factory: AdapterFactory = Arc::new(move |_args: &AdapterArgs| {
                let mut d = ToyDetector::load(&weights)?;
                d.set_name(adapter_name.clone());
                Ok(Box::new(d) as Box<dyn DetectorAdapter>)
            });
            match self.register(&name, factory) {
                Ok(()) => added += 1,
                Err(e) => log::warn!("{e}"),
            }
        }
        Ok(added)
    }

    pub fn register(&mut self, name: &str, factory: AdapterFactory) -> Result<()> {
        if self.factories.contains_key(name) {
            return Err(Error::Registration(name.to_owned()));
        }
        self.factories.insert(name.to_owned(), factory);
        Ok(())
    }

    pub fn list(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn factory(&self, name: &str) -> Result<AdapterFactory> {
        self.factories.get(name).cloned().ok_or_else(|| Error::Lookup {
            name: name.to_owned(),
            available: self.list(),
        })
    }

    pub fn construct(&self, name: &str, args: &AdapterArgs) -> Result<Box<dyn DetectorAdapter>> {
        (self.factory(name)?)(args)
    }
}
