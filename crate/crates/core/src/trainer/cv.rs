use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::fold::{score_split, Split, TrainConfig, TrainState, Trainer};
use crate::dataset::{FoldPlan, Label, SectionKind, WsiBag};
use crate::error::{Error, Result};
use crate::metrics::{threshold_report, EvalReport};

/// Validation reports for one fold, overall and per section kind. A section absent from the
/// fold's validation split has no report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionReports {
    pub all: EvalReport,
    pub frozen: Option<EvalReport>,
    pub paraffin: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub reports: SectionReports,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Standard error of the mean; undefined with fewer than two folds.
    pub sem: Option<f64>,
    /// Folds where the metric was defined.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    /// section ("all", "frozen", "paraffin") → metric → summary across folds.
    pub summary: BTreeMap<String, BTreeMap<String, MetricSummary>>,
}

/// Mean and standard error (sample standard deviation over √n).
pub fn mean_sem(values: &[f64]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sem = (values.len() > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    Some(MetricSummary {
        mean,
        sem,
        n: values.len(),
    })
}

fn metric_values(r: &EvalReport) -> [(&'static str, Option<f64>); 8] {
    [
        ("accuracy", Some(r.accuracy)),
        ("precision", Some(r.precision)),
        ("recall", Some(r.recall)),
        ("f1", Some(r.f1)),
        ("specificity", Some(r.specificity)),
        ("auc", r.auc),
        ("prc_auc", r.prc_auc),
        ("brier", Some(r.brier)),
    ]
}

fn summarize<'a>(reports: impl Iterator<Item = &'a EvalReport>) -> BTreeMap<String, MetricSummary> {
    let mut cols: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (name, v) in metric_values(r) {
            let col = cols.entry(name).or_default();
            col.extend(v);
        }
    }
    cols.into_iter()
        .filter_map(|(k, v)| mean_sem(&v).map(|s| (k.to_string(), s)))
        .collect()
}

fn section_report(
    probs: &[f64],
    bags: &[&WsiBag],
    kind: Option<SectionKind>,
    threshold: f64,
) -> Result<Option<EvalReport>> {
    let (p, y): (Vec<f64>, Vec<bool>) = probs
        .iter()
        .zip(bags)
        .filter(|(_, b)| kind.is_none_or(|k| b.section_kind == k))
        .map(|(p, b)| (*p, b.label == Label::Stas))
        .unzip();
    if p.is_empty() {
        return Ok(None);
    }
    threshold_report(&p, &y, threshold).map(Some)
}

/// Trains one model per fold of `plan`, evaluating each on its held-out slides with the
/// best-validation parameters. Checkpoints go to `out_dir/fold_<i>.ckpt` when a directory is
/// given.
pub fn run_cv(bags: &[WsiBag], plan: &FoldPlan, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<CvResult> {
    let by_id: BTreeMap<&str, &WsiBag> = bags.iter().map(|b| (b.wsi_id.as_str(), b)).collect();
    if let Some(missing) = plan.assignments.keys().find(|id| !by_id.contains_key(id.as_str())) {
        return Err(Error::InvalidArgument(format!("fold plan names unknown slide {missing}")));
    }
    if let Some(b) = bags.iter().find(|b| plan.fold_of(&b.wsi_id).is_none()) {
        return Err(Error::InvalidArgument(format!("slide {} has no fold", b.wsi_id)));
    }
    let mut folds = Vec::with_capacity(plan.num_folds);
    for fold in 0..plan.num_folds {
        let val_ids = plan.validation_ids(fold);
        let train_ids = plan.training_ids(fold);
        let val: Vec<&WsiBag> = val_ids.iter().map(|id| by_id[id.as_str()]).collect();
        let train: Vec<&WsiBag> = train_ids.iter().map(|id| by_id[id.as_str()]).collect();
        let train_patients: BTreeSet<&str> = train.iter().map(|b| b.patient_id.as_str()).collect();
        if let Some(b) = val.iter().find(|b| train_patients.contains(b.patient_id.as_str())) {
            return Err(Error::InvalidArgument(format!(
                "patient {} appears in both splits of fold {fold}",
                b.patient_id
            )));
        }
        let owned = |v: &[&WsiBag]| v.iter().map(|b| (*b).clone()).collect::<Vec<_>>();
        let tr = Split::new(&owned(&train), cfg.model.knn_k)?;
        let va = Split::new(&owned(&val), cfg.model.knn_k)?;
        let trainer = Trainer::new(cfg, &tr, &va)?;
        let mut state = TrainState::new(cfg)?;
        trainer.run(&mut state, cfg.epochs, &mut |_, _| Ok(()))?;

        let probs = score_split(state.inference_params(), &cfg.model, &va)?;
        let reports = SectionReports {
            all: section_report(&probs, &val, None, cfg.threshold)?
                .ok_or_else(|| Error::Empty(format!("validation split of fold {fold}")))?,
            frozen: section_report(&probs, &val, Some(SectionKind::Frozen), cfg.threshold)?,
            paraffin: section_report(&probs, &val, Some(SectionKind::Paraffin), cfg.threshold)?,
        };
        let checkpoint = match out_dir {
            Some(dir) => {
                let path = dir.join(format!("fold_{fold}.ckpt"));
                Checkpoint::new(cfg.clone(), state.clone()).save(&path)?;
                Some(path)
            }
            None => None,
        };
        folds.push(FoldResult {
            fold,
            train_ids,
            val_ids,
            best_epoch: state.best.as_ref().map(|b| b.epoch),
            best_val_loss: state.best.as_ref().map(|b| b.val_loss),
            checkpoint,
            reports,
        });
    }
    let mut summary = BTreeMap::new();
    summary.insert("all".to_string(), summarize(folds.iter().map(|f| &f.reports.all)));
    summary.insert(
        "frozen".to_string(),
        summarize(folds.iter().filter_map(|f| f.reports.frozen.as_ref())),
    );
    summary.insert(
        "paraffin".to_string(),
        summarize(folds.iter().filter_map(|f| f.reports.paraffin.as_ref())),
    );
    Ok(CvResult { folds, summary })
}
