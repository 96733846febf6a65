use serde::{Deserialize, Serialize};

pub const FEATURE_DIM: usize = 768;
pub const SMALL_TILE: u32 = 256;
pub const LARGE_TILE: u32 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    Frozen,
    Paraffin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonStas,
    Stas,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::NonStas => 0,
            Label::Stas => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::Stas
        } else {
            Label::NonStas
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subtype {
    #[serde(rename = "micropapillary")]
    Micropapillary,
    #[serde(rename = "non_micropapillary")]
    NonMicropapillary,
    #[serde(rename = "n/a")]
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Tumor,
    Stroma,
    Immune,
    Erythrocyte,
    Macrophage,
    Dead,
    Other,
}

impl CellType {
    pub const ALL: [CellType; 7] = [
        CellType::Tumor,
        CellType::Stroma,
        CellType::Immune,
        CellType::Erythrocyte,
        CellType::Macrophage,
        CellType::Dead,
        CellType::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CellType::Tumor => "tumor",
            CellType::Stroma => "stroma",
            CellType::Immune => "immune",
            CellType::Erythrocyte => "erythrocyte",
            CellType::Macrophage => "macrophage",
            CellType::Dead => "dead",
            CellType::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<CellType> {
        CellType::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub x: f64,
    pub y: f64,
    pub cell_type: CellType,
    pub prob: f64,
    pub nucleus_area: f64,
}

/// Time-to-event record in days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventTime {
    pub time_days: f64,
    pub event: bool,
}

/// Patch tiles of one scale: level-0 pixel coordinates and `N × 768` features.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub tile_size: u32,
    pub coords: Vec<[u32; 2]>,
    pub features: Vec<f32>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }

    /// Tile centers, used as node coordinates for graph construction.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let half = self.tile_size as f64 / 2.0;
        self.coords
            .iter()
            .map(|c| [c[0] as f64 + half, c[1] as f64 + half])
            .collect()
    }
}

/// One whole-slide image reduced to its patch features and cell records.
#[derive(Debug, Clone, PartialEq)]
pub struct WsiBag {
    pub wsi_id: String,
    pub patient_id: String,
    pub section_kind: SectionKind,
    pub label: Label,
    pub subtype: Subtype,
    pub patches_small: PatchSet,
    pub patches_large: PatchSet,
    pub cells: Vec<CellRecord>,
    pub mpp: f64,
    pub survival: Option<EventTime>,
    pub recurrence: Option<EventTime>,
}

/// The slide-level fields fold planning needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub wsi_id: String,
    pub patient_id: String,
    pub section_kind: SectionKind,
    pub label: Label,
}

impl WsiBag {
    pub fn meta(&self) -> SlideMeta {
        SlideMeta {
            wsi_id: self.wsi_id.clone(),
            patient_id: self.patient_id.clone(),
            section_kind: self.section_kind,
            label: self.label,
        }
    }

    /// Tissue area covered by the small-scale tiles, in level-0 pixels².
    pub fn tissue_area_px2(&self) -> f64 {
        let t = self.patches_small.tile_size as f64;
        self.patches_small.len() as f64 * t * t
    }
}
