//! Main-tumor proposal from the tumor-cell density grid, and point-to-line geometry.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::dataset::{CellRecord, CellType};
use crate::error::{Error, Result};

pub const DEFAULT_GRID_PX: f64 = 100.0;

type Bin = [i64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TumorRegion {
    pub grid_px: f64,
    /// Minimum tumor cells per bin for a bin to be occupied.
    pub threshold: f64,
    /// Bins of the main component with enclosed holes filled, sorted.
    pub bins: Vec<Bin>,
    /// Closed boundary loops in level-0 pixels; the last vertex repeats the first.
    pub boundaries: Vec<Vec<[f64; 2]>>,
    /// Indices (into the input cells) of tumor cells outside the region.
    pub candidates: Vec<usize>,
    pub tumor_cells: usize,
}

impl TumorRegion {
    fn bin_of(&self, x: f64, y: f64) -> Bin {
        [(x / self.grid_px).floor() as i64, (y / self.grid_px).floor() as i64]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.bins.binary_search(&self.bin_of(x, y)).is_ok()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    /// Tumor cells inside the region.
    pub fn inside(&self) -> usize {
        self.tumor_cells - self.candidates.len()
    }

    /// Shortest distance (pixels) from `p` to the region boundary; `None` for an empty region.
    pub fn boundary_distance(&self, p: [f64; 2]) -> Option<f64> {
        self.boundaries
            .iter()
            .flat_map(|loop_| loop_.windows(2))
            .map(|s| point_to_segment(p, s[0], s[1]))
            .min_by(f64::total_cmp)
    }
}

fn point_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Linear-interpolation percentile of `values` (`q` in [0, 100]).
pub(crate) fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Default occupancy threshold: a quarter of the 75th percentile of non-empty bin counts, but
/// at least two cells.
pub fn default_min_density(bin_counts: &[f64]) -> f64 {
    if bin_counts.is_empty() {
        return 2.0;
    }
    (0.25 * percentile(bin_counts, 75.0)).max(2.0)
}

const NEIGHBORS: [[i64; 2]; 4] = [[1, 0], [-1, 0], [0, 1], [0, -1]];

fn components(occupied: &BTreeSet<Bin>) -> Vec<Vec<Bin>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &start in occupied {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some(b) = queue.pop_front() {
            for d in NEIGHBORS {
                let n = [b[0] + d[0], b[1] + d[1]];
                if occupied.contains(&n) && seen.insert(n) {
                    comp.push(n);
                    queue.push_back(n);
                }
            }
        }
        comp.sort();
        out.push(comp);
    }
    out
}

/// Adds bins enclosed by `region` that cannot reach the outside through non-region bins.
fn fill_holes(region: &BTreeSet<Bin>) -> BTreeSet<Bin> {
    let (mut lo, mut hi) = ([i64::MAX; 2], [i64::MIN; 2]);
    for b in region {
        for k in 0..2 {
            lo[k] = lo[k].min(b[k] - 1);
            hi[k] = hi[k].max(b[k] + 1);
        }
    }
    let mut outside = BTreeSet::from([lo]);
    let mut queue = VecDeque::from([lo]);
    while let Some(b) = queue.pop_front() {
        for d in NEIGHBORS {
            let n = [b[0] + d[0], b[1] + d[1]];
            let in_box = (0..2).all(|k| n[k] >= lo[k] && n[k] <= hi[k]);
            if in_box && !region.contains(&n) && outside.insert(n) {
                queue.push_back(n);
            }
        }
    }
    let mut filled = region.clone();
    for x in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            if !outside.contains(&[x, y]) {
                filled.insert([x, y]);
            }
        }
    }
    filled
}

/// Directed boundary edges (region on the left in a y-up frame), chained into closed loops.
fn trace_loops(region: &BTreeSet<Bin>) -> Vec<Vec<Bin>> {
    let mut out_edges: BTreeMap<Bin, Vec<Bin>> = BTreeMap::new();
    let mut add = |a: Bin, b: Bin| out_edges.entry(a).or_default().push(b);
    for &[i, j] in region {
        if !region.contains(&[i, j - 1]) {
            add([i, j], [i + 1, j]);
        }
        if !region.contains(&[i + 1, j]) {
            add([i + 1, j], [i + 1, j + 1]);
        }
        if !region.contains(&[i, j + 1]) {
            add([i + 1, j + 1], [i, j + 1]);
        }
        if !region.contains(&[i - 1, j]) {
            add([i, j + 1], [i, j]);
        }
    }
    let mut loops = Vec::new();
    while let Some((&start, _)) = out_edges.iter().find(|(_, v)| !v.is_empty()) {
        let mut path = vec![start];
        let mut cur = start;
        let mut dir: Option<Bin> = None;
        loop {
            let outs = out_edges.get_mut(&cur).expect("balanced boundary");
            // at a pinch vertex prefer the left turn, so loops touching at a corner stay apart
            let pick = match dir {
                Some(d) if outs.len() > 1 => {
                    let left = [-d[1], d[0]];
                    outs.iter()
                        .position(|n| [n[0] - cur[0], n[1] - cur[1]] == left)
                        .unwrap_or(0)
                }
                _ => 0,
            };
            let next = outs.swap_remove(pick);
            dir = Some([next[0] - cur[0], next[1] - cur[1]]);
            cur = next;
            path.push(cur);
            if cur == start {
                break;
            }
        }
        loops.push(path);
    }
    loops
}

/// Drops vertices in the middle of straight runs; keeps the loop closed.
fn simplify(path: &[Bin]) -> Vec<Bin> {
    let n = path.len() - 1;
    let dir = |a: Bin, b: Bin| [(b[0] - a[0]).signum(), (b[1] - a[1]).signum()];
    let mut out: Vec<Bin> = (0..n)
        .filter(|&i| {
            let prev = path[(i + n - 1) % n];
            dir(prev, path[i]) != dir(path[i], path[i + 1])
        })
        .map(|i| path[i])
        .collect();
    out.push(out[0]);
    out
}

/// Grid-based main-tumor proposal.
///
/// Tumor cells are binned on a square grid of `grid_px` pixels. Bins holding at least
/// `min_density` tumor cells (default [`default_min_density`]) are occupied; the 4-connected
/// component holding the most tumor cells, with enclosed holes filled, is the main tumor.
/// Tumor cells outside it are spread candidates.
pub fn propose_tumor_region(
    cells: &[CellRecord],
    grid_px: f64,
    min_density: Option<f64>,
) -> Result<TumorRegion> {
    if !(grid_px > 0.0 && grid_px.is_finite()) {
        return Err(Error::InvalidArgument(format!("grid size must be positive, got {grid_px}")));
    }
    let tumor: Vec<usize> = (0..cells.len())
        .filter(|&i| cells[i].cell_type == CellType::Tumor)
        .collect();
    let bin_of = |c: &CellRecord| [(c.x / grid_px).floor() as i64, (c.y / grid_px).floor() as i64];
    let mut counts: BTreeMap<Bin, usize> = BTreeMap::new();
    for &i in &tumor {
        *counts.entry(bin_of(&cells[i])).or_insert(0) += 1;
    }
    let count_values: Vec<f64> = counts.values().map(|&c| c as f64).collect();
    let threshold = min_density.unwrap_or_else(|| default_min_density(&count_values));
    let occupied: BTreeSet<Bin> = counts
        .iter()
        .filter(|(_, &c)| c as f64 >= threshold)
        .map(|(b, _)| *b)
        .collect();
    let main = components(&occupied)
        .into_iter()
        .map(|c| (c.iter().map(|b| counts[b]).sum::<usize>(), c))
        // most cells, then most bins, then the earliest bin
        .max_by(|(na, a), (nb, b)| na.cmp(nb).then(a.len().cmp(&b.len())).then(b[0].cmp(&a[0])))
        .map(|(_, c)| c);
    let region: BTreeSet<Bin> = match main {
        Some(c) => fill_holes(&c.into_iter().collect()),
        None => BTreeSet::new(),
    };
    let boundaries = trace_loops(&region)
        .iter()
        .map(|l| {
            simplify(l)
                .into_iter()
                .map(|v| [v[0] as f64 * grid_px, v[1] as f64 * grid_px])
                .collect()
        })
        .collect();
    let candidates = tumor
        .iter()
        .copied()
        .filter(|&i| !region.contains(&bin_of(&cells[i])))
        .collect();
    Ok(TumorRegion {
        grid_px,
        threshold,
        bins: region.into_iter().collect(),
        boundaries,
        candidates,
        tumor_cells: tumor.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineDistance {
    pub px: f64,
    pub um: f64,
}

/// Perpendicular distance from `p` to the infinite line through `a` and `b`, in pixels and
/// micrometres.
pub fn point_to_line_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2], mpp: f64) -> Result<LineDistance> {
    if [p, a, b].iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurement coordinates".into()));
    }
    if !(mpp > 0.0 && mpp.is_finite()) {
        return Err(Error::InvalidArgument(format!("mpp must be positive, got {mpp}")));
    }
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = dx.hypot(dy);
    if len == 0.0 {
        return Err(Error::InvalidArgument("line endpoints coincide".into()));
    }
    let cross = dx * (p[1] - a[1]) - dy * (p[0] - a[0]);
    let px = cross.abs() / len;
    Ok(LineDistance { px, um: px * mpp })
}
