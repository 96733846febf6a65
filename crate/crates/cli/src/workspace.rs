//! On-disk layout shared by the commands and the service: a data directory holds one
//! subdirectory per slide (manifest, blobs, `thumbnail.png`) plus `index.json` and the
//! measurement store.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use daem_core::attribution::{decode_png, encode_png, render_density_thumbnail, RgbImage};
use daem_core::dataset::{load_bag, Label, SectionKind, Subtype, WsiBag, MANIFEST_FILE};
use daem_core::trainer::{Checkpoint, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::failure::{CliResult, Failure};

pub const THUMBNAIL_FILE: &str = "thumbnail.png";
pub const INDEX_FILE: &str = "index.json";
/// Level-0 pixels per thumbnail pixel.
pub const THUMBNAIL_DOWNSAMPLE: f64 = 32.0;
pub const DATA_DIR_ENV: &str = "DAEM_DATA_DIR";

#[derive(Debug, Clone)]
pub struct SlideEntry {
    pub dir: PathBuf,
    pub bag: WsiBag,
}

/// Loads every slide directory under `root`, sorted by directory name.
pub fn scan_cohort(root: &Path) -> CliResult<Vec<SlideEntry>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Failure::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let bag = load_bag(&dir)?;
        if !seen.insert(bag.wsi_id.clone()) {
            return Err(Failure::Validation(format!(
                "{}: wsi_id {:?} appears in more than one slide directory",
                dir.join(MANIFEST_FILE).display(),
                bag.wsi_id
            )));
        }
        out.push(SlideEntry { dir, bag });
    }
    Ok(out)
}

/// The slide's stored thumbnail, or a cell-density stand-in when none exists.
pub fn load_thumbnail(entry: &SlideEntry) -> CliResult<RgbImage> {
    let path = entry.dir.join(THUMBNAIL_FILE);
    match fs::read(&path) {
        Ok(bytes) => decode_png(&bytes).map_err(|e| Failure::Validation(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Ok(render_density_thumbnail(&entry.bag, THUMBNAIL_DOWNSAMPLE)?)
        }
        Err(e) => Err(Failure::io(&path, e)),
    }
}

/// Writes the density stand-in next to the manifest unless a thumbnail is already there.
/// Returns true when a file was written.
pub fn ensure_thumbnail(entry: &SlideEntry) -> CliResult<bool> {
    let path = entry.dir.join(THUMBNAIL_FILE);
    if path.is_file() {
        decode_png(&fs::read(&path).map_err(|e| Failure::io(&path, e))?)
            .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
        return Ok(false);
    }
    let img = render_density_thumbnail(&entry.bag, THUMBNAIL_DOWNSAMPLE)?;
    fs::write(&path, encode_png(&img)?).map_err(|e| Failure::io(&path, e))?;
    Ok(true)
}

/// Box-filter reduction by an integer factor.
pub fn shrink(img: &RgbImage, factor: u32) -> RgbImage {
    if factor <= 1 {
        return img.clone();
    }
    let w = img.width.div_ceil(factor).max(1);
    let h = img.height.div_ceil(factor).max(1);
    let mut pixels = Vec::with_capacity(3 * (w * h) as usize);
    for oy in 0..h {
        for ox in 0..w {
            let mut sum = [0u32; 3];
            let mut n = 0;
            for y in oy * factor..((oy + 1) * factor).min(img.height) {
                for x in ox * factor..((ox + 1) * factor).min(img.width) {
                    let p = img.get(x, y);
                    (0..3).for_each(|c| sum[c] += p[c] as u32);
                    n += 1;
                }
            }
            pixels.extend(sum.map(|s| ((s + n / 2) / n.max(1)) as u8));
        }
    }
    RgbImage {
        width: w,
        height: h,
        pixels,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub wsi_id: String,
    pub patient_id: String,
    pub label: Label,
    pub section_kind: SectionKind,
    pub subtype: Subtype,
    pub dir: String,
    pub patches_small: usize,
    pub patches_large: usize,
    pub cells: usize,
    pub mpp: f64,
}

impl IndexEntry {
    pub fn new(root: &Path, e: &SlideEntry) -> Self {
        let dir = e.dir.strip_prefix(root).unwrap_or(&e.dir);
        IndexEntry {
            wsi_id: e.bag.wsi_id.clone(),
            patient_id: e.bag.patient_id.clone(),
            label: e.bag.label,
            section_kind: e.bag.section_kind,
            subtype: e.bag.subtype,
            dir: dir.to_string_lossy().into_owned(),
            patches_small: e.bag.patches_small.len(),
            patches_large: e.bag.patches_large.len(),
            cells: e.bag.cells.len(),
            mpp: e.bag.mpp,
        }
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Other(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
    }
    fs::write(path, text + "\n").map_err(|e| Failure::io(path, e))
}

/// Training config from a JSON file (missing keys take defaults), or the defaults.
pub fn load_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.validate()
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.map_or("default config".into(), |p| p.display().to_string()))))?;
    Ok(cfg)
}

/// A checkpoint with the hex SHA-256 of its file bytes, used as a cache key.
pub fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, String)> {
    let bytes = fs::read(path).map_err(|e| Failure::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    let hash = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    Ok((ckpt, hash))
}
