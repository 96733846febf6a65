//! Routing model attention back to patches and cells, heatmap rendering and patch ranking.
//!
//! Each pooled token carries the input node that attained its max-pool winner. A token's
//! aggregation weight is credited to that node, so a patch's raw score is the attention mass
//! routed to it. Because the aggregation softmax spans all three branches, each branch's
//! routed mass is rescaled to sum to one per expert before the two experts are averaged.

mod render;

use serde::{Deserialize, Serialize};

pub use render::{decode_png, encode_png, jet, render_density_thumbnail, render_heatmap, RgbImage, HEATMAP_ALPHA};

use crate::dataset::{CellType, PatchSet, WsiBag};
use crate::error::{Error, Result};
use crate::graphs::BagGraphs;
use crate::model::{predict, ModelConfig, ModelParams};

/// Patch scale: 20× detail (256-pixel tiles) or 10× context (512-pixel tiles).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scale {
    #[serde(rename = "20x")]
    X20,
    #[serde(rename = "10x")]
    X10,
}

impl Scale {
    pub fn parse(s: &str) -> Option<Scale> {
        match s {
            "20x" => Some(Scale::X20),
            "10x" => Some(Scale::X10),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Scale::X20 => "20x",
            Scale::X10 => "10x",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    pub index: usize,
    /// Level-0 top-left corner.
    pub x: u32,
    pub y: u32,
    /// Min-max normalized over the slide's patches at this scale.
    pub score: f64,
    /// Routed attention averaged over the two experts.
    pub raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub wsi_id: String,
    pub scale: Scale,
    pub tile_size: u32,
    pub patches: Vec<PatchScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub cell_type: CellType,
    pub score: f64,
    pub raw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub small: AttributionMap,
    pub large: AttributionMap,
    pub cells: Vec<CellScore>,
    /// Aggregation mass per expert and branch (small, large, tme) before rescaling.
    pub branch_mass: [[f64; 3]; 2],
    /// Per expert and branch: the routed mass after rescaling (one, up to rounding).
    pub routed_sums: [[f64; 3]; 2],
    pub stas_probability: f64,
}

impl Attribution {
    pub fn map(&self, scale: Scale) -> &AttributionMap {
        match scale {
            Scale::X20 => &self.small,
            Scale::X10 => &self.large,
        }
    }
}

/// Min-max normalization to [0, 1]; constant input maps to 0.5.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn patch_map(wsi_id: &str, scale: Scale, patches: &PatchSet, raw: Vec<f64>) -> AttributionMap {
    let norm = min_max(&raw);
    AttributionMap {
        wsi_id: wsi_id.to_string(),
        scale,
        tile_size: patches.tile_size,
        patches: patches
            .coords
            .iter()
            .enumerate()
            .map(|(i, c)| PatchScore {
                index: i,
                x: c[0],
                y: c[1],
                score: norm[i],
                raw: raw[i],
            })
            .collect(),
    }
}

/// Inference-mode attribution of one slide.
pub fn attribute(bag: &WsiBag, params: &ModelParams, cfg: &ModelConfig) -> Result<Attribution> {
    let graphs = BagGraphs::from_bag(bag, cfg.knn_k)?;
    let out = predict(params, cfg, &graphs)?;
    let sizes = [graphs.small.num_nodes(), graphs.large.num_nodes(), graphs.tme.num_nodes()];
    let mut raw: [Vec<f64>; 3] = sizes.map(|n| vec![0.0; n]);
    let mut branch_mass = [[0.0; 3]; 2];
    let mut routed_sums = [[0.0; 3]; 2];
    for (e, expert) in out.experts.iter().enumerate() {
        let routed = expert.routed_attention();
        if routed.len() != 3 {
            return Err(Error::Shape(format!("expert routed {} branches", routed.len())));
        }
        for (ci, branch) in routed.into_iter().enumerate() {
            let b = crate::model::expert::CONCAT_TO_MSGC[ci];
            if branch.len() != sizes[b] {
                return Err(Error::Shape(format!(
                    "provenance covers {} inputs, branch has {}",
                    branch.len(),
                    sizes[b]
                )));
            }
            let mass: f64 = branch.iter().sum();
            branch_mass[e][b] = mass;
            if !(mass > 0.0) {
                return Err(Error::NonFinite(format!("attention mass of branch {b}")));
            }
            let mut s = 0.0;
            for (acc, v) in raw[b].iter_mut().zip(&branch) {
                let share = v / mass;
                s += share;
                *acc += 0.5 * share;
            }
            routed_sums[e][b] = s;
        }
    }
    let [small_raw, large_raw, tme_raw] = raw;
    let cell_norm = min_max(&tme_raw);
    Ok(Attribution {
        small: patch_map(&bag.wsi_id, Scale::X20, &bag.patches_small, small_raw),
        large: patch_map(&bag.wsi_id, Scale::X10, &bag.patches_large, large_raw),
        cells: bag
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| CellScore {
                index: i,
                x: c.x,
                y: c.y,
                cell_type: c.cell_type,
                score: cell_norm[i],
                raw: tme_raw[i],
            })
            .collect(),
        branch_mass,
        routed_sums,
        stas_probability: out.stas_probability(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopPatches {
    pub high: Vec<usize>,
    pub middle: Vec<usize>,
    pub low: Vec<usize>,
}

/// `n` highest, `n` lowest and `n` nearest-to-median patches, as disjoint tiers picked in
/// that order. Ties go to the lower patch index.
pub fn top_patches(map: &AttributionMap, n: usize) -> Result<TopPatches> {
    let m = map.patches.len();
    if n == 0 || m < 3 * n {
        return Err(Error::InvalidArgument(format!(
            "need at least {} patches for {n} per tier, have {m}",
            3 * n
        )));
    }
    let score = |i: usize| map.patches[i].score;
    let mut taken = vec![false; m];
    let pick = |key: &dyn Fn(usize) -> f64, taken: &mut Vec<bool>| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..m).filter(|&i| !taken[i]).collect();
        idx.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
        idx.truncate(n);
        idx.iter().for_each(|&i| taken[i] = true);
        idx.into_iter().map(|i| map.patches[i].index).collect()
    };
    let mut sorted: Vec<f64> = (0..m).map(score).collect();
    sorted.sort_by(f64::total_cmp);
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0
    };
    let high = pick(&|i| -score(i), &mut taken);
    let low = pick(&score, &mut taken);
    let middle = pick(&|i| (score(i) - median).abs(), &mut taken);
    Ok(TopPatches { high, middle, low })
}
