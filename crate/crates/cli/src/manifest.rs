//! Run manifest: written before the work starts and rewritten when it ends.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use patchattack::fsutil::{sha256_hex, write_atomic};
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub version: &'static str,
    pub status: &'static str,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub seed: u64,
    pub settings: Value,
    pub settings_digest: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<Value>,
    #[serde(skip)]
    path: PathBuf,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Manifest {
    /// Creates `out` if needed and writes a `running` manifest into it.
    pub fn start(
        out: &Path,
        command: &'static str,
        seed: u64,
        settings: Value,
        inputs: Vec<String>,
    ) -> Result<Self, CliError> {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
        let settings_digest = sha256_hex(settings.to_string().as_bytes());
        let m = Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            status: "running",
            started_unix: now(),
            finished_unix: None,
            seed,
            settings,
            settings_digest,
            inputs,
            outputs: Vec::new(),
            summary: None,
            path: out.join(FILE_NAME),
        };
        m.write()?;
        Ok(m)
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, summary: Option<Value>) -> Result<(), CliError> {
        self.status = "complete";
        self.finished_unix = Some(now());
        self.summary = summary;
        self.write()
    }

    fn write(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_atomic(&self.path, text.as_bytes()).map_err(CliError::from)
    }
}
