//! The optimized patch and its on-disk representation.
//!
//! A saved patch is a file triple sharing one stem:
//! `<stem>.png` (8-bit RGB view), `<stem>.patch` (exact pixels) and
//! `<stem>.json` (metadata). The `.patch` sidecar is a 16-byte header
//! (`"TSEA"`, version `u16`, height `u32`, width `u32`, 2 reserved bytes)
//! followed by little-endian `f32` values in row-major HWC order.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{self, sha256_hex};
use crate::image::{Image, CHANNELS};

pub const SIDECAR_MAGIC: &[u8; 4] = b"TSEA";
pub const SIDECAR_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Gray,
    Random,
    White,
    FromFile,
}

impl InitMode {
    pub const CONTROLS: [InitMode; 3] = [InitMode::Gray, InitMode::Random, InitMode::White];

    pub fn as_str(&self) -> &'static str {
        match self {
            InitMode::Gray => "gray",
            InitMode::Random => "random",
            InitMode::White => "white",
            InitMode::FromFile => "from_file",
        }
    }

    /// Control patches are the non-optimized initializations.
    pub fn is_control(&self) -> bool {
        !matches!(self, InitMode::FromFile)
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(InitMode::Gray),
            "random" => Ok(InitMode::Random),
            "white" => Ok(InitMode::White),
            "from_file" => Ok(InitMode::FromFile),
            other => Err(Error::Argument(format!(
                "unknown patch mode `{other}` (gray, random, white, from_file)"
            ))),
        }
    }
}

/// Provenance carried next to the pixels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    /// How the patch was created: an [`InitMode`] name or `"trained"`.
    pub mode: String,
    pub config_digest: Option<String>,
    pub epoch: Option<usize>,
    /// Adapter the patch was optimized against, if any.
    pub white_box: Option<String>,
    /// Content digest; filled in on save.
    #[serde(default)]
    pub digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialPatch {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    pub meta: PatchMeta,
}

impl AdversarialPatch {
    pub fn init<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        mode: InitMode,
        source: Option<&Path>,
        rng: &mut R,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Argument(format!(
                "patch size {height}x{width} must be at least 1x1"
            )));
        }
        let n = height * width * CHANNELS;
        let pixels = match (mode, source) {
            (InitMode::FromFile, Some(path)) => {
                let loaded = load_any(path)?;
                if loaded.height != height || loaded.width != width {
                    return Err(Error::load(
                        path,
                        format!(
                            "expected a {height}x{width} patch, found {}x{}",
                            loaded.height, loaded.width
                        ),
                    ));
                }
                loaded.pixels
            }
            (InitMode::FromFile, None) => {
                return Err(Error::Argument("from_file patch init needs a source path".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Argument(format!(
                    "a source path is only valid with from_file, not {}",
                    mode.as_str()
                )))
            }
            (InitMode::Gray, None) => vec![0.5; n],
            (InitMode::White, None) => vec![1.0; n],
            (InitMode::Random, None) => (0..n).map(|_| rng.gen::<f32>()).collect(),
        };
        Ok(Self {
            height,
            width,
            pixels,
            meta: PatchMeta {
                mode: mode.as_str().into(),
                ..PatchMeta::default()
            },
        })
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * CHANNELS {
            return Err(Error::shape(
                format!("{height}x{width}x3 (non-empty)"),
                pixels.len().to_string(),
            ));
        }
        let mut p = Self {
            height,
            width,
            pixels,
            meta: PatchMeta::default(),
        };
        p.clamp();
        Ok(p)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn to_image(&self) -> Image {
        Image::from_vec(
            self.height,
            self.width,
            self.pixels.iter().map(|&v| v as f64).collect(),
        )
        .expect("patch dimensions are consistent")
    }

    /// Overwrites the pixels from double-precision values, clamping to [0,1].
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.pixels.len() {
            return Err(Error::shape(
                self.pixels.len().to_string(),
                values.len().to_string(),
            ));
        }
        for (p, &v) in self.pixels.iter_mut().zip(values) {
            *p = v.clamp(0.0, 1.0) as f32;
        }
        Ok(())
    }

    pub fn clamp(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    /// SHA-256 over the sidecar bytes and the config digest, if any.
    pub fn digest(&self) -> String {
        let mut bytes = self.sidecar_bytes();
        if let Some(cfg) = &self.meta.config_digest {
            bytes.extend_from_slice(cfg.as_bytes());
        }
        sha256_hex(&bytes)
    }

    pub fn sidecar_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.pixels.len() * 4);
        out.extend_from_slice(SIDECAR_MAGIC);
        out.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&[0, 0]);
        for v in &self.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_sidecar_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != SIDECAR_MAGIC {
            return Err(Error::load(origin, "missing TSEA sidecar header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != SIDECAR_VERSION {
            return Err(Error::load(origin, format!("unsupported sidecar version {version}")));
        }
        let height = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let expected = HEADER_LEN + height * width * CHANNELS * 4;
        if height == 0 || width == 0 || bytes.len() != expected {
            return Err(Error::load(
                origin,
                format!(
                    "expected {expected} bytes for a {height}x{width}x3 patch, found {}",
                    bytes.len()
                ),
            ));
        }
        let pixels: Vec<f32> = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::load(origin, "pixel values outside [0,1]"));
        }
        Ok(Self {
            height,
            width,
            pixels,
            meta: PatchMeta::default(),
        })
    }

    /// Writes `<stem>.png`, `<stem>.patch` and `<stem>.json`. Returns the paths
    /// in that order.
    pub fn save(&self, stem: &Path) -> Result<[PathBuf; 3]> {
        let [png, sidecar, json] = artifact_paths(stem);
        let mut meta = self.meta.clone();
        meta.digest = Some(self.digest());
        self.to_image().save_png(&png)?;
        fsutil::write_atomic(&sidecar, &self.sidecar_bytes())?;
        fsutil::write_atomic(&json, serde_json::to_string_pretty(&meta)?.as_bytes())?;
        Ok([png, sidecar, json])
    }

    /// Loads from any member of the file triple (or its bare stem). The sidecar
    /// is preferred; the PNG is used only when no sidecar exists.
    pub fn load(path: &Path) -> Result<Self> {
        load_any(path)
    }
}

fn artifact_paths(stem: &Path) -> [PathBuf; 3] {
    let base = strip_known_ext(stem);
    ["png", "patch", "json"].map(|ext| {
        let mut s = base.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    })
}

fn strip_known_ext(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png" | "patch" | "json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn load_any(path: &Path) -> Result<AdversarialPatch> {
    let [png, sidecar, json] = artifact_paths(path);
    let meta: Option<PatchMeta> = if json.exists() {
        let text = std::fs::read_to_string(&json).map_err(|e| Error::load(&json, e.to_string()))?;
        Some(serde_json::from_str(&text).map_err(|e| Error::load(&json, e.to_string()))?)
    } else {
        None
    };
    let explicit_png = path.extension().is_some_and(|e| e == "png");
    let mut patch = if !explicit_png && sidecar.exists() {
        let bytes = std::fs::read(&sidecar).map_err(|e| Error::load(&sidecar, e.to_string()))?;
        AdversarialPatch::from_sidecar_bytes(&bytes, &sidecar)?
    } else if png.exists() {
        let img = Image::open(&png)?;
        let pixels = img.data().iter().map(|&v| v as f32).collect();
        AdversarialPatch::from_pixels(img.height(), img.width(), pixels)?
    } else {
        return Err(Error::load(path, "no patch sidecar or image found"));
    };
    if let Some(meta) = meta {
        patch.meta = meta;
        let from_sidecar = !explicit_png && sidecar.exists();
        if from_sidecar {
            if let Some(recorded) = patch.meta.digest.clone() {
                let actual = patch.digest();
                if recorded != actual {
                    return Err(Error::Integrity(format!(
                        "{}: metadata digest {recorded} does not match pixels ({actual})",
                        sidecar.display()
                    )));
                }
            }
        }
    } else {
        patch.meta.mode = InitMode::FromFile.as_str().into();
    }
    Ok(patch)
}
