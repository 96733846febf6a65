use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ranking::{prc_auc, roc_auc};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    /// Mean predicted probability; `None` for empty bins.
    pub mean_predicted: Option<f64>,
    pub observed: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub bins: Vec<CalibrationBin>,
    pub brier: f64,
}

fn check_probs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(p) = scores.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Mean squared error between predicted probability and outcome.
pub fn brier_score(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_probs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Empty("brier score".into()));
    }
    let s: f64 = scores
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            let d = p - y as u8 as f64;
            d * d
        })
        .sum();
    Ok(s / scores.len() as f64)
}

/// Equal-width reliability bins over [0, 1]; a probability of exactly 1 falls in the last bin.
pub fn calibration_curve(scores: &[f64], labels: &[bool], bins: usize) -> Result<Calibration> {
    if bins == 0 {
        return Err(Error::InvalidArgument("at least one calibration bin".into()));
    }
    let brier = brier_score(scores, labels)?;
    let mut sum_p = vec![0.0; bins];
    let mut sum_y = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&p, &y) in scores.iter().zip(labels) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        sum_p[b] += p;
        sum_y[b] += y as u8 as f64;
        count[b] += 1;
    }
    let bins = (0..bins)
        .map(|b| {
            let n = count[b];
            CalibrationBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                mean_predicted: (n > 0).then(|| sum_p[b] / n as f64),
                observed: (n > 0).then(|| sum_y[b] / n as f64),
                count: n,
            }
        })
        .collect();
    Ok(Calibration { bins, brier })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    /// Undefined when only one class is present.
    pub auc: Option<f64>,
    pub prc_auc: Option<f64>,
    pub brier: f64,
    pub calibration: Vec<CalibrationBin>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion-table metrics at `threshold` (predicted positive when `p ≥ threshold`), plus
/// ranking metrics and 10-bin calibration.
pub fn threshold_report(scores: &[f64], labels: &[bool], threshold: f64) -> Result<EvalReport> {
    check_probs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &y) in scores.iter().zip(labels) {
        match (p >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let both = tp + fn_ > 0 && tn + fp > 0;
    let cal = calibration_curve(scores, labels, 10)?;
    Ok(EvalReport {
        n: scores.len(),
        threshold,
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, scores.len()),
        precision,
        recall,
        f1,
        specificity: ratio(tn, tn + fp),
        auc: if both { Some(roc_auc(scores, labels)?) } else { None },
        prc_auc: if tp + fn_ > 0 { Some(prc_auc(scores, labels)?) } else { None },
        brier: cal.brier,
        calibration: cal.bins,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

impl EvalReport {
    /// One `key=value` pair per line. Calibration bins appear as
    /// `calibration.<i>=<lower>,<upper>,<mean predicted>,<observed>,<count>`; undefined values
    /// print as `NA`.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("n", self.n.to_string()),
            ("threshold", self.threshold.to_string()),
            ("tp", self.tp.to_string()),
            ("fp", self.fp.to_string()),
            ("tn", self.tn.to_string()),
            ("fn", self.fn_.to_string()),
            ("accuracy", self.accuracy.to_string()),
            ("precision", self.precision.to_string()),
            ("recall", self.recall.to_string()),
            ("f1", self.f1.to_string()),
            ("specificity", self.specificity.to_string()),
            ("auc", opt(self.auc)),
            ("prc_auc", opt(self.prc_auc)),
            ("brier", self.brier.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        for (i, b) in self.calibration.iter().enumerate() {
            let _ = writeln!(
                s,
                "calibration.{i}={},{},{},{},{}",
                b.lower,
                b.upper,
                opt(b.mean_predicted),
                opt(b.observed),
                b.count
            );
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::InvalidArgument(format!("malformed report line {line:?}"));
        let mut map = std::collections::BTreeMap::new();
        let mut calibration = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
            if k.starts_with("calibration.") {
                let f: Vec<&str> = v.split(',').collect();
                if f.len() != 5 {
                    return Err(bad(line));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
                let opt_num = |s: &str| if s == "NA" { Ok(None) } else { num(s).map(Some) };
                calibration.push(CalibrationBin {
                    lower: num(f[0])?,
                    upper: num(f[1])?,
                    mean_predicted: opt_num(f[2])?,
                    observed: opt_num(f[3])?,
                    count: f[4].parse().map_err(|_| bad(line))?,
                });
            } else {
                map.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("report missing key {k}")))
        };
        let f = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(k)) };
        let u = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(k)) };
        let o = |k: &str| -> Result<Option<f64>> {
            let v = get(k)?;
            if v == "NA" {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad(k))
            }
        };
        Ok(EvalReport {
            n: u("n")?,
            threshold: f("threshold")?,
            tp: u("tp")?,
            fp: u("fp")?,
            tn: u("tn")?,
            fn_: u("fn")?,
            accuracy: f("accuracy")?,
            precision: f("precision")?,
            recall: f("recall")?,
            f1: f("f1")?,
            specificity: f("specificity")?,
            auc: o("auc")?,
            prc_auc: o("prc_auc")?,
            brier: f("brier")?,
            calibration,
        })
    }
}
