//! Per-slide indicator tables and the cohort-level biomarker tests built on them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::indicators::{compute_tme_metrics, TmeConfig, TmeMetrics, INDICATOR_NAMES};
use super::stats::{
    dunn_posthoc, km_logrank, kruskal_wallis, stratify_by_median, t_test_two_sided, DunnPair,
    KruskalWallis, LogRank, TTest,
};
use crate::dataset::{CellType, EventTime, Label, SectionKind, Subtype, WsiBag};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideTme {
    pub wsi_id: String,
    pub patient_id: String,
    pub label: Label,
    pub section_kind: SectionKind,
    pub subtype: Subtype,
    pub survival: Option<EventTime>,
    pub recurrence: Option<EventTime>,
    pub metrics: TmeMetrics,
}

pub fn slide_metrics(bags: &[WsiBag], cfg: &TmeConfig) -> Result<Vec<SlideTme>> {
    bags.iter()
        .map(|b| {
            Ok(SlideTme {
                wsi_id: b.wsi_id.clone(),
                patient_id: b.patient_id.clone(),
                label: b.label,
                section_kind: b.section_kind,
                subtype: b.subtype,
                survival: b.survival,
                recurrence: b.recurrence,
                metrics: compute_tme_metrics(&b.cells, b.tissue_area_px2(), b.mpp, cfg)?,
            })
        })
        .collect()
}

fn tag<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

/// Header of the indicator table written by [`to_csv`].
pub fn csv_header() -> String {
    let mut cols: Vec<String> = ["wsi_id", "patient_id", "label", "section_kind", "subtype"]
        .map(String::from)
        .to_vec();
    cols.extend(CellType::ALL.iter().map(|t| format!("count_{}", t.name())));
    cols.push("tissue_area_mm2".into());
    cols.push("vessel_clusters".into());
    cols.extend(INDICATOR_NAMES.iter().map(|s| s.to_string()));
    cols.join(",")
}

/// One row per slide; undefined ratios are written as `NA`.
pub fn to_csv(rows: &[SlideTme]) -> String {
    let mut s = csv_header();
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        let mut fields = vec![
            r.wsi_id.clone(),
            r.patient_id.clone(),
            tag(&r.label),
            tag(&r.section_kind),
            tag(&r.subtype),
        ];
        fields.extend(m.counts.iter().map(|c| c.to_string()));
        fields.push(m.tissue_area_mm2.to_string());
        fields.push(m.vessel_clusters.to_string());
        fields.extend(
            m.indicators()
                .iter()
                .map(|v| v.map_or_else(|| "NA".to_string(), |x| x.to_string())),
        );
        let _ = writeln!(s, "{}", fields.join(","));
    }
    s
}

/// Tests of one indicator: STAS against non-STAS (Welch), and non-STAS against
/// non-micropapillary STAS against micropapillary STAS (Kruskal–Wallis, Dunn). Slides where
/// the indicator is undefined are left out; a test is `None` when a group is too small.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorTests {
    pub indicator: String,
    pub n_stas: usize,
    pub n_non_stas: usize,
    pub t_test: Option<TTest>,
    /// Group sizes for non-STAS, non-micropapillary STAS, micropapillary STAS.
    pub subtype_sizes: [usize; 3],
    pub kruskal_wallis: Option<KruskalWallis>,
    pub dunn: Vec<DunnPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalSplit {
    pub indicator: String,
    /// "survival" or "recurrence".
    pub endpoint: String,
    pub median: f64,
    pub n_high: usize,
    pub n_low: usize,
    /// Groups: 1 = high, 0 = low. `None` when either group is empty.
    pub logrank: Option<LogRank>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub tests: Vec<IndicatorTests>,
    pub survival: Vec<SurvivalSplit>,
}

/// Indicators whose median split is tested against outcome.
pub const PROGNOSTIC_INDICATORS: [&str; 3] = ["str", "itr", "mvd"];

fn subtype_group(r: &SlideTme) -> usize {
    match (r.label, r.subtype) {
        (Label::NonStas, _) => 0,
        (Label::Stas, Subtype::Micropapillary) => 2,
        (Label::Stas, _) => 1,
    }
}

fn indicator_tests(rows: &[SlideTme], idx: usize) -> Result<IndicatorTests> {
    let mut by_label: [Vec<f64>; 2] = Default::default();
    let mut by_subtype: [Vec<f64>; 3] = Default::default();
    for r in rows {
        if let Some(v) = r.metrics.indicators()[idx] {
            by_label[r.label.index()].push(v);
            by_subtype[subtype_group(r)].push(v);
        }
    }
    let t_test = if by_label.iter().all(|g| g.len() >= 2) {
        Some(t_test_two_sided(&by_label[1], &by_label[0])?)
    } else {
        None
    };
    let groups: Vec<Vec<f64>> = by_subtype.to_vec();
    let (kruskal_wallis, dunn) = if groups.iter().all(|g| !g.is_empty()) {
        (Some(kruskal_wallis(&groups)?), dunn_posthoc(&groups)?)
    } else {
        (None, Vec::new())
    };
    Ok(IndicatorTests {
        indicator: INDICATOR_NAMES[idx].to_string(),
        n_stas: by_label[1].len(),
        n_non_stas: by_label[0].len(),
        t_test,
        subtype_sizes: [by_subtype[0].len(), by_subtype[1].len(), by_subtype[2].len()],
        kruskal_wallis,
        dunn,
    })
}

/// Patient-level outcome splits among STAS-positive patients: each patient's indicator is the
/// mean over their slides where it is defined.
fn survival_splits(rows: &[SlideTme]) -> Result<Vec<SurvivalSplit>> {
    let mut out = Vec::new();
    for name in PROGNOSTIC_INDICATORS {
        let idx = INDICATOR_NAMES.iter().position(|n| *n == name).expect("known indicator");
        for endpoint in ["survival", "recurrence"] {
            let mut patients: BTreeMap<&str, (Vec<f64>, Option<EventTime>)> = BTreeMap::new();
            for r in rows.iter().filter(|r| r.label == Label::Stas) {
                let outcome = if endpoint == "survival" { r.survival } else { r.recurrence };
                let e = patients.entry(&r.patient_id).or_insert((Vec::new(), outcome));
                e.0.extend(r.metrics.indicators()[idx]);
            }
            let (values, outcomes): (Vec<f64>, Vec<EventTime>) = patients
                .into_values()
                .filter_map(|(v, o)| {
                    let o = o.filter(|o| o.time_days > 0.0)?;
                    (!v.is_empty()).then(|| (v.iter().sum::<f64>() / v.len() as f64, o))
                })
                .unzip();
            if values.len() < 2 {
                continue;
            }
            let split = stratify_by_median(&values, &(0..values.len()).collect::<Vec<_>>())?;
            let mut groups = vec![0usize; values.len()];
            for &i in &split.high {
                groups[i] = 1;
            }
            let logrank = if split.high.is_empty() || split.low.is_empty() {
                None
            } else {
                let times: Vec<f64> = outcomes.iter().map(|o| o.time_days).collect();
                let events: Vec<bool> = outcomes.iter().map(|o| o.event).collect();
                Some(km_logrank(&times, &events, &groups)?)
            };
            out.push(SurvivalSplit {
                indicator: name.to_string(),
                endpoint: endpoint.to_string(),
                median: split.median,
                n_high: split.high.len(),
                n_low: split.low.len(),
                logrank,
            });
        }
    }
    Ok(out)
}

pub fn cohort_analysis(rows: &[SlideTme]) -> Result<CohortReport> {
    Ok(CohortReport {
        tests: (0..INDICATOR_NAMES.len())
            .map(|i| indicator_tests(rows, i))
            .collect::<Result<_>>()?,
        survival: survival_splits(rows)?,
    })
}
