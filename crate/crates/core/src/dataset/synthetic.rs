//! Synthetic cohorts with a planted, learnable STAS signal.
//!
//! Every slide has a dense main tissue cluster and a small satellite cluster of tiles placed
//! several tiles away from it. In STAS slides the satellite tiles carry tumor-like features and
//! hold a few tumor cells; in non-STAS slides the satellite looks like alveolar tissue with
//! macrophages. Feature prototypes come from a fixed seed so independently generated train and
//! test cohorts share them.

use std::collections::BTreeSet;

use super::bag::{
    CellRecord, CellType, EventTime, Label, PatchSet, SectionKind, Subtype, WsiBag, FEATURE_DIM,
    LARGE_TILE, SMALL_TILE,
};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub id_prefix: String,
    pub slides_per_patient: (usize, usize),
    pub frozen_fraction: f64,
    pub feature_noise: f64,
    pub signal: f64,
    pub prototype_seed: u64,
    pub mpp: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            id_prefix: "syn".into(),
            slides_per_patient: (1, 1),
            frozen_fraction: 1.0 / 6.0,
            feature_noise: 0.5,
            signal: 1.0,
            prototype_seed: 0x5EED_DAE0,
            mpp: 0.5,
        }
    }
}

/// Indices of the planted satellite tiles in each bag.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedRegion {
    pub small: Vec<usize>,
    pub large: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub bags: Vec<WsiBag>,
    pub planted: Vec<PlantedRegion>,
}

struct Prototypes {
    normal: Vec<f64>,
    primary: Vec<f64>,
    stas: Vec<f64>,
    alveolar: Vec<f64>,
}

impl Prototypes {
    fn new(seed: u64, signal: f64) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut draw = |scale: f64| -> Vec<f64> {
            (0..FEATURE_DIM).map(|_| scale * rng.normal()).collect()
        };
        let normal = draw(1.0);
        let primary_dir = draw(0.7);
        let stas_dir = draw(signal);
        let alveolar_dir = draw(signal);
        let add = |d: &[f64]| normal.iter().zip(d).map(|(a, b)| a + b).collect::<Vec<_>>();
        Prototypes {
            primary: add(&primary_dir),
            stas: add(&stas_dir),
            alveolar: add(&alveolar_dir),
            normal,
        }
    }
}

fn emit(features: &mut Vec<f32>, proto: &[f64], noise: f64, rng: &mut SeededRng) {
    features.extend(proto.iter().map(|p| (p + noise * rng.normal()) as f32));
}

pub fn generate_synthetic_cohort(n_patients: usize, rng: &mut SeededRng) -> Result<Vec<WsiBag>> {
    Ok(generate_synthetic(n_patients, &SyntheticConfig::default(), rng)?.bags)
}

pub fn generate_synthetic(
    n_patients: usize,
    cfg: &SyntheticConfig,
    rng: &mut SeededRng,
) -> Result<SyntheticCohort> {
    if n_patients < 2 {
        return Err(Error::InvalidArgument(
            "synthetic cohort needs at least 2 patients".into(),
        ));
    }
    let protos = Prototypes::new(cfg.prototype_seed, cfg.signal);
    let mut labels: Vec<Label> = (0..n_patients)
        .map(|i| if i % 2 == 0 { Label::Stas } else { Label::NonStas })
        .collect();
    rng.shuffle(&mut labels);

    let mut bags = Vec::new();
    let mut planted = Vec::new();
    for (p, &label) in labels.iter().enumerate() {
        let (lo, hi) = cfg.slides_per_patient;
        let n_slides = lo + rng.below(hi.saturating_sub(lo) + 1);
        let subtype = if label == Label::Stas && rng.bernoulli(0.4) {
            Subtype::Micropapillary
        } else {
            Subtype::NonMicropapillary
        };
        let survival_mean = if label == Label::Stas { 900.0 } else { 1600.0 };
        let survival = Some(EventTime {
            time_days: 1.0 + (-rng.uniform().max(1e-12).ln()) * survival_mean,
            event: rng.bernoulli(0.6),
        });
        let recurrence = Some(EventTime {
            time_days: 1.0 + (-rng.uniform().max(1e-12).ln()) * survival_mean * 0.7,
            event: rng.bernoulli(0.5),
        });
        for s in 0..n_slides.max(1) {
            let kind = if rng.bernoulli(cfg.frozen_fraction) {
                SectionKind::Frozen
            } else {
                SectionKind::Paraffin
            };
            let (mut bag, plant) = synth_slide(label, cfg, &protos, rng);
            bag.wsi_id = format!("{}{:03}_{}", cfg.id_prefix, p, s);
            bag.patient_id = format!("{}p{:03}", cfg.id_prefix, p);
            bag.section_kind = kind;
            bag.subtype = subtype;
            bag.survival = survival;
            bag.recurrence = recurrence;
            bags.push(bag);
            planted.push(plant);
        }
    }
    Ok(SyntheticCohort { bags, planted })
}

fn synth_slide(
    label: Label,
    cfg: &SyntheticConfig,
    protos: &Prototypes,
    rng: &mut SeededRng,
) -> (WsiBag, PlantedRegion) {
    let (cx, cy) = (16i64, 16i64);
    let radius = rng.uniform_range(2.2, 2.9);
    let mut grid: Vec<([i64; 2], bool)> = Vec::new();
    for i in -3..=3i64 {
        for j in -3..=3i64 {
            if ((i * i + j * j) as f64) <= radius * radius {
                grid.push(([cx + i, cy + j], false));
            }
        }
    }
    let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
    let dist = 7.0;
    let sx = cx + (dist * theta.cos()).round() as i64;
    let sy = cy + (dist * theta.sin()).round() as i64;
    for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        grid.push(([sx + di, sy + dj], true));
    }

    let satellite_proto = match label {
        Label::Stas => &protos.stas,
        Label::NonStas => &protos.alveolar,
    };
    let mut small = PatchSet {
        tile_size: SMALL_TILE,
        coords: Vec::new(),
        features: Vec::new(),
    };
    let mut planted_small = Vec::new();
    for (idx, (g, sat)) in grid.iter().enumerate() {
        small.coords.push([(g[0] * 256) as u32, (g[1] * 256) as u32]);
        let proto = if *sat {
            planted_small.push(idx);
            satellite_proto
        } else if rng.bernoulli(0.3) {
            &protos.primary
        } else {
            &protos.normal
        };
        emit(&mut small.features, proto, cfg.feature_noise, rng);
    }

    let mut large_tiles: BTreeSet<([u32; 2], bool)> = BTreeSet::new();
    for (c, (_, sat)) in small.coords.iter().zip(&grid) {
        let key = [c[0] / LARGE_TILE * LARGE_TILE, c[1] / LARGE_TILE * LARGE_TILE];
        large_tiles.insert((key, *sat));
    }
    // a tile touched by any satellite patch counts as satellite
    let mut large_keys: Vec<([u32; 2], bool)> = Vec::new();
    for (k, sat) in large_tiles {
        match large_keys.last_mut() {
            Some(last) if last.0 == k => last.1 |= sat,
            _ => large_keys.push((k, sat)),
        }
    }
    let mut large = PatchSet {
        tile_size: LARGE_TILE,
        coords: Vec::new(),
        features: Vec::new(),
    };
    let mut planted_large = Vec::new();
    for (idx, (k, sat)) in large_keys.iter().enumerate() {
        large.coords.push(*k);
        let proto = if *sat {
            planted_large.push(idx);
            satellite_proto
        } else {
            &protos.normal
        };
        emit(&mut large.features, proto, cfg.feature_noise, rng);
    }

    let center = [(cx * 256 + 128) as f64, (cy * 256 + 128) as f64];
    let sat_center = [(sx * 256 + 256) as f64, (sy * 256 + 256) as f64];
    let mut cells = Vec::new();
    let mut add_cells = |n: usize, ty: CellType, at: [f64; 2], sd: f64, rng: &mut SeededRng| {
        for _ in 0..n {
            cells.push(CellRecord {
                x: (at[0] + sd * rng.normal()).max(0.0),
                y: (at[1] + sd * rng.normal()).max(0.0),
                cell_type: ty,
                prob: rng.uniform_range(0.6, 0.99),
                nucleus_area: (50f64.ln() + 0.3 * rng.normal()).exp(),
            });
        }
    };
    add_cells(16, CellType::Tumor, center, 120.0, rng);
    add_cells(10, CellType::Stroma, center, 300.0, rng);
    add_cells(5, CellType::Immune, center, 350.0, rng);
    for _ in 0..2 {
        let at = [center[0] + 250.0 * rng.normal(), center[1] + 250.0 * rng.normal()];
        add_cells(5, CellType::Erythrocyte, at, 6.0, rng);
    }
    add_cells(2, CellType::Macrophage, center, 300.0, rng);
    add_cells(1, CellType::Dead, center, 300.0, rng);
    add_cells(2, CellType::Other, center, 300.0, rng);
    let sat_type = match label {
        Label::Stas => CellType::Tumor,
        Label::NonStas => CellType::Macrophage,
    };
    add_cells(4, sat_type, sat_center, 80.0, rng);

    let bag = WsiBag {
        wsi_id: String::new(),
        patient_id: String::new(),
        section_kind: SectionKind::Paraffin,
        label,
        subtype: Subtype::NotApplicable,
        patches_small: small,
        patches_large: large,
        cells,
        mpp: cfg.mpp,
        survival: None,
        recurrence: None,
    };
    (
        bag,
        PlantedRegion {
            small: planted_small,
            large: planted_large,
        },
    )
}
