//! Tumor-microenvironment indicators, biomarker statistics, main-tumor proposal and
//! distance geometry.

mod cohort;
mod indicators;
mod region;
mod stats;

pub use cohort::{
    cohort_analysis, csv_header, slide_metrics, to_csv, CohortReport, IndicatorTests, SlideTme,
    SurvivalSplit, PROGNOSTIC_INDICATORS,
};
pub use indicators::{
    compute_tme_metrics, linkage_clusters, RatioBasis, TmeConfig, TmeMetrics, INDICATOR_NAMES,
};
pub use region::{
    default_min_density, point_to_line_distance, propose_tumor_region, LineDistance, TumorRegion,
    DEFAULT_GRID_PX,
};
pub use stats::{
    dunn_posthoc, kaplan_meier, km_logrank, kruskal_wallis, stratify_by_median, t_test_two_sided,
    DunnPair, KmCurve, KruskalWallis, LogRank, MedianSplit, TTest,
};
