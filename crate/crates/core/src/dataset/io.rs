//! Bag directory format.
//!
//! ```text
//! <wsi_id>/manifest.json    ids, label, mpp, cell records, coordinate tables, blob CRC-32s
//! <wsi_id>/features_s.bin   256-px tiles, N_s × 768 little-endian f32, row-major
//! <wsi_id>/features_l.bin   512-px tiles, N_l × 768 little-endian f32, row-major
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bag::{
    CellRecord, CellType, EventTime, Label, PatchSet, SectionKind, Subtype, WsiBag, FEATURE_DIM,
    LARGE_TILE, SMALL_TILE,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SMALL_BLOB: &str = "features_s.bin";
pub const LARGE_BLOB: &str = "features_l.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct PatchTable {
    tile_size: u32,
    blob: String,
    crc32: u32,
    coords: Vec<[u32; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CellEntry {
    x: f64,
    y: f64,
    cell_type: String,
    prob: f64,
    nucleus_area: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    wsi_id: String,
    patient_id: String,
    section_kind: SectionKind,
    label: Label,
    subtype: Subtype,
    mpp: f64,
    feature_dim: usize,
    patches_small: PatchTable,
    patches_large: PatchTable,
    cells: Vec<CellEntry>,
    survival: Option<EventTime>,
    recurrence: Option<EventTime>,
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn encode_features(features: &[f32]) -> Vec<u8> {
    features.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `bag` into `dir` (created if needed).
pub fn write_bag(dir: &Path, bag: &WsiBag) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tables = Vec::with_capacity(2);
    for (set, blob) in [
        (&bag.patches_small, SMALL_BLOB),
        (&bag.patches_large, LARGE_BLOB),
    ] {
        let bytes = encode_features(&set.features);
        let path = dir.join(blob);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        tables.push(PatchTable {
            tile_size: set.tile_size,
            blob: blob.to_string(),
            crc32: crc32fast::hash(&bytes),
            coords: set.coords.clone(),
        });
    }
    let large = tables.pop().unwrap();
    let small = tables.pop().unwrap();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        wsi_id: bag.wsi_id.clone(),
        patient_id: bag.patient_id.clone(),
        section_kind: bag.section_kind,
        label: bag.label,
        subtype: bag.subtype,
        mpp: bag.mpp,
        feature_dim: FEATURE_DIM,
        patches_small: small,
        patches_large: large,
        cells: bag
            .cells
            .iter()
            .map(|c| CellEntry {
                x: c.x,
                y: c.y,
                cell_type: c.cell_type.name().to_string(),
                prob: c.prob,
                nucleus_area: c.nucleus_area,
            })
            .collect(),
        survival: bag.survival,
        recurrence: bag.recurrence,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn load_patches(dir: &Path, table: &PatchTable, which: &str, manifest: &Path) -> Result<PatchSet> {
    if table.coords.is_empty() {
        return Err(Error::validation(manifest, which, "at least one patch required"));
    }
    let path = dir.join(&table.blob);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = table.coords.len() * FEATURE_DIM * 4;
    if bytes.len() != expected {
        return Err(Error::BlobLength {
            path,
            expected,
            actual: bytes.len(),
        });
    }
    let actual = crc32fast::hash(&bytes);
    if actual != table.crc32 {
        return Err(Error::Checksum {
            path,
            expected: table.crc32,
            actual,
        });
    }
    let features: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = features.iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(
            &path,
            format!("{which}.features[{}]", i / FEATURE_DIM),
            "non-finite feature value",
        ));
    }
    Ok(PatchSet {
        tile_size: table.tile_size,
        coords: table.coords.clone(),
        features,
    })
}

fn check_event(e: &Option<EventTime>, field: &str, path: &Path) -> Result<()> {
    if let Some(ev) = e {
        if !(ev.time_days.is_finite() && ev.time_days > 0.0) {
            return Err(Error::validation(path, field, "time_days must be positive"));
        }
    }
    Ok(())
}

/// Loads and validates a bag from its directory or its `manifest.json`.
pub fn load_bag(path: &Path) -> Result<WsiBag> {
    let mpath = manifest_path(path);
    let dir = mpath.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&mpath, e))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::validation(
            &mpath,
            "format_version",
            format!("unsupported version {}", m.format_version),
        ));
    }
    if m.feature_dim != FEATURE_DIM {
        return Err(Error::validation(
            &mpath,
            "feature_dim",
            format!("expected {FEATURE_DIM}, found {}", m.feature_dim),
        ));
    }
    if !(m.mpp.is_finite() && m.mpp > 0.0) {
        return Err(Error::validation(&mpath, "mpp", "must be positive"));
    }
    if m.wsi_id.is_empty() {
        return Err(Error::validation(&mpath, "wsi_id", "must be non-empty"));
    }
    let patches_small = load_patches(&dir, &m.patches_small, "patches_small", &mpath)?;
    let patches_large = load_patches(&dir, &m.patches_large, "patches_large", &mpath)?;
    if patches_small.tile_size != SMALL_TILE || patches_large.tile_size != LARGE_TILE {
        return Err(Error::validation(
            &mpath,
            "tile_size",
            format!("expected {SMALL_TILE}/{LARGE_TILE}"),
        ));
    }
    let mut cells = Vec::with_capacity(m.cells.len());
    for (i, c) in m.cells.iter().enumerate() {
        let cell_type = CellType::parse(&c.cell_type).ok_or_else(|| {
            Error::validation(
                &mpath,
                format!("cells[{i}].cell_type"),
                format!("unknown cell type {:?}", c.cell_type),
            )
        })?;
        if !(0.0..=1.0).contains(&c.prob) {
            return Err(Error::validation(&mpath, format!("cells[{i}].prob"), "outside [0, 1]"));
        }
        if !(c.nucleus_area.is_finite() && c.nucleus_area > 0.0) {
            return Err(Error::validation(
                &mpath,
                format!("cells[{i}].nucleus_area"),
                "must be positive",
            ));
        }
        if !(c.x.is_finite() && c.y.is_finite() && c.x >= 0.0 && c.y >= 0.0) {
            return Err(Error::validation(
                &mpath,
                format!("cells[{i}]"),
                "coordinates must be finite and non-negative",
            ));
        }
        cells.push(CellRecord {
            x: c.x,
            y: c.y,
            cell_type,
            prob: c.prob,
            nucleus_area: c.nucleus_area,
        });
    }
    check_event(&m.survival, "survival", &mpath)?;
    check_event(&m.recurrence, "recurrence", &mpath)?;
    Ok(WsiBag {
        wsi_id: m.wsi_id,
        patient_id: m.patient_id,
        section_kind: m.section_kind,
        label: m.label,
        subtype: m.subtype,
        patches_small,
        patches_large,
        cells,
        mpp: m.mpp,
        survival: m.survival,
        recurrence: m.recurrence,
    })
}

/// Loads every bag directory (one containing a manifest) directly under `root`, sorted by name.
pub fn load_cohort(root: &Path) -> Result<Vec<WsiBag>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_bag(d)).collect()
}

/// Writes each bag to `root/<wsi_id>`.
pub fn write_cohort(root: &Path, bags: &[WsiBag]) -> Result<()> {
    for bag in bags {
        write_bag(&root.join(&bag.wsi_id), bag)?;
    }
    Ok(())
}
