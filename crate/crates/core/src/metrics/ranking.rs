//! Ranking metrics and the DeLong comparison of correlated AUCs.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn check_pair(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Two-class AUC as `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)` by counting every positive/negative pair.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_pair(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("roc_auc needs both classes".into()));
    }
    // doubled counts keep the tie half-credit integral
    let mut twice: u64 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            twice += match si.partial_cmp(&sj) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Average precision: `Σ_t (R_t − R_{t−1}) P_t` over the distinct score thresholds, highest first.
pub fn prc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_pair(scores, labels)?;
    if pos == 0 {
        return Err(Error::InvalidArgument("prc_auc needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p_value: f64,
    /// Set when the variance of the AUC difference is zero; `z` is 0 and `p_value` 1.
    pub degenerate: bool,
}

fn psi(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

/// Structural components `(V10 over positives, V01 over negatives)` for one score vector.
fn components(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    let v10 = pos
        .iter()
        .map(|&x| neg.iter().map(|&y| psi(x, y)).sum::<f64>() / neg.len() as f64)
        .collect();
    let v01 = neg
        .iter()
        .map(|&y| pos.iter().map(|&x| psi(x, y)).sum::<f64>() / pos.len() as f64)
        .collect();
    (v10, v01)
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1.0)
}

/// Two-sided DeLong test for the difference between two AUCs measured on the same samples.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<DelongResult> {
    let (pos, neg) = check_pair(scores_a, labels)?;
    check_pair(scores_b, labels)?;
    if pos < 2 || neg < 2 {
        return Err(Error::InvalidArgument(
            "DeLong test needs at least two samples per class".into(),
        ));
    }
    let (a10, a01) = components(scores_a, labels);
    let (b10, b01) = components(scores_b, labels);
    let auc_a = a10.iter().sum::<f64>() / pos as f64;
    let auc_b = b10.iter().sum::<f64>() / pos as f64;
    let var10 = covariance(&a10, &a10) + covariance(&b10, &b10) - 2.0 * covariance(&a10, &b10);
    let var01 = covariance(&a01, &a01) + covariance(&b01, &b01) - 2.0 * covariance(&a01, &b01);
    let var = var10 / pos as f64 + var01 / neg as f64;
    if var <= 1e-15 {
        return Ok(DelongResult {
            auc_a,
            auc_b,
            z: 0.0,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let z = (auc_a - auc_b) / var.sqrt();
    Ok(DelongResult {
        auc_a,
        auc_b,
        z,
        p_value: two_sided_normal_p(z),
        degenerate: false,
    })
}

pub(crate) fn two_sided_normal_p(z: f64) -> f64 {
    let n = Normal::standard();
    (2.0 * n.cdf(-z.abs())).min(1.0)
}
