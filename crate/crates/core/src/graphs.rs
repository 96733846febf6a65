//! Spatial k-nearest-neighbour graphs over patch tiles and segmented cells.

use serde::{Deserialize, Serialize};

use crate::dataset::{CellRecord, CellType, PatchSet, WsiBag};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_K: usize = 9;
/// One-hot cell type (7), classification probability, log nucleus area.
pub const TME_FEATURE_DIM: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphScale {
    Small,
    Large,
    Tme,
}

/// Node features, coordinates and directed neighbour edges. Self-loops are never stored;
/// aggregation adds the node itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    pub node_features: Tensor,
    pub coords: Vec<[f64; 2]>,
    pub edges: Vec<(usize, usize)>,
    pub scale: GraphScale,
    offsets: Vec<usize>,
}

impl SpatialGraph {
    pub fn new(
        node_features: Tensor,
        coords: Vec<[f64; 2]>,
        mut edges: Vec<(usize, usize)>,
        scale: GraphScale,
    ) -> Result<Self> {
        let n = node_features.rows();
        if coords.len() != n {
            return Err(Error::Shape(format!(
                "{} coordinates for {} nodes",
                coords.len(),
                n
            )));
        }
        if let Some(e) = edges.iter().find(|(s, d)| *s >= n || *d >= n || s == d) {
            return Err(Error::InvalidArgument(format!("invalid edge {e:?} for {n} nodes")));
        }
        // stable: keeps per-source neighbour order
        edges.sort_by_key(|e| e.0);
        let mut offsets = vec![0; n + 1];
        for &(s, _) in &edges {
            offsets[s + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        Ok(SpatialGraph {
            node_features,
            coords,
            edges,
            scale,
            offsets,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    /// Out-neighbours of `v` in ascending distance order.
    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges[self.offsets[v]..self.offsets[v + 1]]
            .iter()
            .map(|e| e.1)
    }

    pub fn out_degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Directed edges from every node to its `min(k, N-1)` nearest neighbours by Euclidean
/// distance; equal distances go to the lower index.
pub fn build_knn_graph(coords: &[[f64; 2]], k: usize) -> Vec<(usize, usize)> {
    let n = coords.len();
    let kk = k.min(n.saturating_sub(1));
    let mut edges = Vec::with_capacity(n * kk);
    if kk == 0 {
        return edges;
    }
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(coords[i], coords[j]), j)),
        );
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if kk < cand.len() {
            cand.select_nth_unstable_by(kk - 1, cmp);
            cand.truncate(kk);
        }
        cand.sort_by(cmp);
        edges.extend(cand.iter().map(|&(_, j)| (i, j)));
    }
    edges
}

/// Graph over one scale of patch tiles, nodes at tile centres.
pub fn build_patch_graph(patches: &PatchSet, k: usize, scale: GraphScale) -> Result<SpatialGraph> {
    let coords = patches.centers();
    let dim = patches.features.len() / patches.len().max(1);
    let feats = Tensor::new(
        vec![patches.len(), dim],
        patches.features.iter().map(|&v| v as f64).collect(),
    )?;
    let edges = build_knn_graph(&coords, k);
    SpatialGraph::new(feats, coords, edges, scale)
}

pub fn tme_node_features(cell: &CellRecord) -> [f64; TME_FEATURE_DIM] {
    let mut f = [0.0; TME_FEATURE_DIM];
    f[cell.cell_type.index()] = 1.0;
    f[7] = cell.prob;
    f[8] = cell.nucleus_area.ln();
    f
}

/// Cell graph whose k-NN edges only join cells of the same type.
pub fn build_tme_graph(cells: &[CellRecord], k: usize) -> Result<SpatialGraph> {
    let coords: Vec<[f64; 2]> = cells.iter().map(|c| [c.x, c.y]).collect();
    let mut edges = Vec::new();
    for ty in CellType::ALL {
        let members: Vec<usize> = (0..cells.len())
            .filter(|&i| cells[i].cell_type == ty)
            .collect();
        let local: Vec<[f64; 2]> = members.iter().map(|&i| coords[i]).collect();
        edges.extend(
            build_knn_graph(&local, k)
                .into_iter()
                .map(|(s, d)| (members[s], members[d])),
        );
    }
    let data = cells.iter().flat_map(tme_node_features).collect();
    let feats = Tensor::new(vec![cells.len(), TME_FEATURE_DIM], data)?;
    SpatialGraph::new(feats, coords, edges, GraphScale::Tme)
}

/// The three graphs the model consumes for one slide.
#[derive(Debug, Clone)]
pub struct BagGraphs {
    pub small: SpatialGraph,
    pub large: SpatialGraph,
    pub tme: SpatialGraph,
}

impl BagGraphs {
    pub fn from_bag(bag: &WsiBag, k: usize) -> Result<Self> {
        Ok(BagGraphs {
            small: build_patch_graph(&bag.patches_small, k, GraphScale::Small)?,
            large: build_patch_graph(&bag.patches_large, k, GraphScale::Large)?,
            tme: build_tme_graph(&bag.cells, k)?,
        })
    }
}
