//! Classification, ranking and calibration metrics.

mod ranking;
mod report;

pub use ranking::{delong_test, prc_auc, roc_auc, DelongResult};
pub(crate) use ranking::two_sided_normal_p;
pub use report::{
    brier_score, calibration_curve, threshold_report, Calibration, CalibrationBin, EvalReport,
};
