use serde::{Deserialize, Serialize};

use crate::dataset::{CellRecord, CellType};
use crate::error::{Error, Result};

/// What the stroma/immune/macrophage ratios compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioBasis {
    Count,
    /// Sums of nucleus areas instead of cell counts.
    NucleusArea,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TmeConfig {
    /// Erythrocytes closer than this (µm) belong to the same vessel-proxy cluster.
    pub linkage_um: f64,
    /// Clusters with fewer erythrocytes are ignored.
    pub min_cluster_size: usize,
    pub ratio_basis: RatioBasis,
}

impl Default for TmeConfig {
    fn default() -> Self {
        TmeConfig {
            linkage_um: 30.0,
            min_cluster_size: 5,
            ratio_basis: RatioBasis::Count,
        }
    }
}

/// Microenvironment indicators of one slide. The 16 indicators are the seven type fractions
/// plus STR, ITR, MVD, SVR, three densities, the dead-cell fraction and the
/// macrophage-to-tumor ratio. Ratios with a zero denominator are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmeMetrics {
    /// Indexed by `CellType::index`.
    pub counts: [usize; 7],
    /// All zero for a slide without cells.
    pub fractions: [f64; 7],
    pub str_ratio: Option<f64>,
    pub itr: Option<f64>,
    /// Erythrocyte clusters per mm².
    pub mvd: f64,
    pub vessel_clusters: usize,
    pub svr: Option<f64>,
    pub tumor_density: f64,
    pub immune_density: f64,
    pub stromal_density: f64,
    pub dead_fraction: f64,
    pub macrophage_tumor_ratio: Option<f64>,
    pub tissue_area_mm2: f64,
}

/// Names of the 16 indicators, in the order returned by [`TmeMetrics::indicators`].
pub const INDICATOR_NAMES: [&str; 16] = [
    "frac_tumor",
    "frac_stroma",
    "frac_immune",
    "frac_erythrocyte",
    "frac_macrophage",
    "frac_dead",
    "frac_other",
    "str",
    "itr",
    "mvd",
    "svr",
    "tumor_density",
    "immune_density",
    "stromal_density",
    "dead_fraction",
    "macrophage_tumor_ratio",
];

impl TmeMetrics {
    pub fn indicators(&self) -> [Option<f64>; 16] {
        let f = self.fractions;
        [
            Some(f[0]),
            Some(f[1]),
            Some(f[2]),
            Some(f[3]),
            Some(f[4]),
            Some(f[5]),
            Some(f[6]),
            self.str_ratio,
            self.itr,
            Some(self.mvd),
            self.svr,
            Some(self.tumor_density),
            Some(self.immune_density),
            Some(self.stromal_density),
            Some(self.dead_fraction),
            self.macrophage_tumor_ratio,
        ]
    }

    pub fn indicator(&self, name: &str) -> Option<Option<f64>> {
        INDICATOR_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.indicators()[i])
    }
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.size[a] < self.size[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        self.size[a] += self.size[b];
    }
}

/// Sizes of single-linkage clusters of `points` at distance `radius` (inclusive).
pub fn linkage_clusters(points: &[[f64; 2]], radius: f64) -> Vec<usize> {
    use std::collections::HashMap;
    let n = points.len();
    let mut uf = UnionFind::new(n);
    if radius > 0.0 {
        // bucket by a grid of cell size `radius`; linked pairs are in adjacent buckets
        let key = |p: &[f64; 2]| ((p[0] / radius).floor() as i64, (p[1] / radius).floor() as i64);
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(key(p)).or_default().push(i);
        }
        let r2 = radius * radius;
        for (i, p) in points.iter().enumerate() {
            let (bx, by) = key(p);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(list) = buckets.get(&(bx + dx, by + dy)) else { continue };
                    for &j in list.iter().filter(|&&j| j > i) {
                        let q = points[j];
                        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                        if d2 <= r2 {
                            uf.union(i, j);
                        }
                    }
                }
            }
        }
    } else {
        for i in 0..n {
            for j in i + 1..n {
                if points[i] == points[j] {
                    uf.union(i, j);
                }
            }
        }
    }
    let mut sizes = std::collections::BTreeMap::new();
    for i in 0..n {
        *sizes.entry(uf.find(i)).or_insert(0) += 1;
    }
    sizes.into_values().collect()
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

/// Indicators for one slide from its cell records, tissue area in level-0 pixels² and
/// microns per pixel.
pub fn compute_tme_metrics(
    cells: &[CellRecord],
    tissue_area_px2: f64,
    mpp: f64,
    cfg: &TmeConfig,
) -> Result<TmeMetrics> {
    if !(tissue_area_px2 > 0.0 && tissue_area_px2.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "tissue area must be positive, got {tissue_area_px2}"
        )));
    }
    if !(mpp > 0.0 && mpp.is_finite()) {
        return Err(Error::InvalidArgument(format!("mpp must be positive, got {mpp}")));
    }
    let mut counts = [0usize; 7];
    let mut areas = [0.0f64; 7];
    for c in cells {
        counts[c.cell_type.index()] += 1;
        areas[c.cell_type.index()] += c.nucleus_area;
    }
    let total: usize = counts.iter().sum();
    let mut fractions = [0.0; 7];
    if total > 0 {
        for (f, c) in fractions.iter_mut().zip(counts) {
            *f = c as f64 / total as f64;
        }
    }
    let amount = |t: CellType| match cfg.ratio_basis {
        RatioBasis::Count => counts[t.index()] as f64,
        RatioBasis::NucleusArea => areas[t.index()],
    };

    let erythrocytes: Vec<[f64; 2]> = cells
        .iter()
        .filter(|c| c.cell_type == CellType::Erythrocyte)
        .map(|c| [c.x, c.y])
        .collect();
    let vessel_clusters = linkage_clusters(&erythrocytes, cfg.linkage_um / mpp)
        .into_iter()
        .filter(|&s| s >= cfg.min_cluster_size)
        .count();

    let area_mm2 = tissue_area_px2 * mpp * mpp / 1e6;
    let density = |t: CellType| counts[t.index()] as f64 / area_mm2;
    Ok(TmeMetrics {
        counts,
        fractions,
        str_ratio: ratio(amount(CellType::Stroma), amount(CellType::Tumor)),
        itr: ratio(amount(CellType::Immune), amount(CellType::Tumor)),
        mvd: vessel_clusters as f64 / area_mm2,
        vessel_clusters,
        svr: ratio(amount(CellType::Stroma), vessel_clusters as f64),
        tumor_density: density(CellType::Tumor),
        immune_density: density(CellType::Immune),
        stromal_density: density(CellType::Stroma),
        dead_fraction: fractions[CellType::Dead.index()],
        macrophage_tumor_ratio: ratio(amount(CellType::Macrophage), amount(CellType::Tumor)),
        tissue_area_mm2: area_mm2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(x: f64, y: f64, t: CellType) -> CellRecord {
        CellRecord {
            x,
            y,
            cell_type: t,
            prob: 0.9,
            nucleus_area: 40.0,
        }
    }

    #[test]
    fn ratios_by_definition() {
        let mut cells: Vec<_> = (0..10).map(|i| cell(i as f64, 0.0, CellType::Tumor)).collect();
        cells.extend((0..5).map(|i| cell(i as f64, 9.0, CellType::Stroma)));
        let m = compute_tme_metrics(&cells, 1e6, 0.5, &TmeConfig::default()).unwrap();
        assert_eq!(m.str_ratio, Some(0.5));
        assert_eq!(m.itr, Some(0.0));
        assert_eq!(m.mvd, 0.0);
        assert_eq!(m.svr, None);
        assert!((m.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // 1e6 px² at 0.5 µm/px is 0.25 mm²
        assert!((m.tumor_density - 40.0).abs() < 1e-9);
    }

    #[test]
    fn no_tumor_leaves_ratios_undefined() {
        let cells = vec![cell(0.0, 0.0, CellType::Stroma)];
        let m = compute_tme_metrics(&cells, 100.0, 1.0, &TmeConfig::default()).unwrap();
        assert_eq!((m.str_ratio, m.itr, m.macrophage_tumor_ratio), (None, None, None));
    }

    #[test]
    fn zero_area_rejected() {
        assert!(compute_tme_metrics(&[], 0.0, 0.5, &TmeConfig::default()).is_err());
    }

    #[test]
    fn cluster_size_threshold() {
        // 5 erythrocytes in a chain 50 px apart at 0.5 µm/px (25 µm) link; 4 elsewhere do not count
        let mut cells: Vec<_> = (0..5).map(|i| cell(50.0 * i as f64, 0.0, CellType::Erythrocyte)).collect();
        cells.extend((0..4).map(|i| cell(1e4 + i as f64, 1e4, CellType::Erythrocyte)));
        let m = compute_tme_metrics(&cells, 1e6, 0.5, &TmeConfig::default()).unwrap();
        assert_eq!(m.vessel_clusters, 1);
        // spacing 70 px is 35 µm: the chain breaks into singletons
        let chain: Vec<_> = (0..5).map(|i| cell(70.0 * i as f64, 0.0, CellType::Erythrocyte)).collect();
        let m = compute_tme_metrics(&chain, 1e6, 0.5, &TmeConfig::default()).unwrap();
        assert_eq!(m.vessel_clusters, 0);
    }

    #[test]
    fn grid_linkage_matches_all_pairs() {
        let mut rng = crate::numerics::SeededRng::new(3);
        for _ in 0..30 {
            let pts: Vec<[f64; 2]> = (0..60).map(|_| [rng.uniform() * 200.0, rng.uniform() * 200.0]).collect();
            let r = 5.0 + rng.uniform() * 20.0;
            let mut uf = UnionFind::new(pts.len());
            for i in 0..pts.len() {
                for j in 0..i {
                    let d = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
                    if d <= r {
                        uf.union(i, j);
                    }
                }
            }
            let mut want = std::collections::BTreeMap::new();
            for i in 0..pts.len() {
                *want.entry(uf.find(i)).or_insert(0usize) += 1;
            }
            let mut want: Vec<usize> = want.into_values().collect();
            let mut got = linkage_clusters(&pts, r);
            want.sort();
            got.sort();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn area_basis() {
        let mut cells = vec![cell(0.0, 0.0, CellType::Tumor), cell(1.0, 0.0, CellType::Tumor)];
        let mut s = cell(2.0, 0.0, CellType::Stroma);
        s.nucleus_area = 160.0;
        cells.push(s);
        let cfg = TmeConfig {
            ratio_basis: RatioBasis::NucleusArea,
            ..TmeConfig::default()
        };
        let m = compute_tme_metrics(&cells, 100.0, 1.0, &cfg).unwrap();
        assert_eq!(m.str_ratio, Some(2.0));
    }
}
