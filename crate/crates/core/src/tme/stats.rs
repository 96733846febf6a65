//! Group comparisons and survival analysis for microenvironment indicators.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::metrics::two_sided_normal_p;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom; `None` when both variances are zero.
    pub df: Option<f64>,
    pub p_value: f64,
    /// Both groups have zero variance.
    pub degenerate: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Two-sided Welch t-test (unequal variances).
///
/// With zero variance in both groups the statistic is 0 with p = 1 for equal means, and
/// ±∞ with p = 0 otherwise; either way `degenerate` is set.
pub fn t_test_two_sided(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("t-test needs at least two values per group".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-test input".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let equal = ma == mb;
        return Ok(TTest {
            t: if equal { 0.0 } else { (ma - mb).signum() * f64::INFINITY },
            df: None,
            p_value: if equal { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(TTest {
        t,
        df: Some(df),
        p_value: (2.0 * dist.cdf(-t.abs())).min(1.0),
        degenerate: false,
    })
}

/// Mid-ranks (1-based) of `values` and the tie term `Σ (t³ − t)` over tie groups.
fn mid_ranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KruskalWallis {
    pub h: f64,
    pub df: usize,
    pub p_value: f64,
}

struct RankedGroups {
    mean_ranks: Vec<f64>,
    sizes: Vec<usize>,
    n: f64,
    ties: f64,
}

fn rank_groups(groups: &[Vec<f64>]) -> Result<RankedGroups> {
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("rank test needs at least two groups".into()));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::Empty("rank test group".into()));
    }
    let pooled: Vec<f64> = groups.iter().flatten().copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank test input".into()));
    }
    let (ranks, ties) = mid_ranks(&pooled);
    let mut mean_ranks = Vec::with_capacity(groups.len());
    let mut at = 0;
    for g in groups {
        mean_ranks.push(ranks[at..at + g.len()].iter().sum::<f64>() / g.len() as f64);
        at += g.len();
    }
    Ok(RankedGroups {
        mean_ranks,
        sizes: groups.iter().map(Vec::len).collect(),
        n: pooled.len() as f64,
        ties,
    })
}

/// Kruskal–Wallis H with tie correction; chi-square p with `k − 1` degrees of freedom.
/// All-identical input gives H = 0, p = 1.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<KruskalWallis> {
    let r = rank_groups(groups)?;
    let df = groups.len() - 1;
    let correction = 1.0 - r.ties / (r.n * r.n * r.n - r.n);
    if correction <= 0.0 {
        return Ok(KruskalWallis {
            h: 0.0,
            df,
            p_value: 1.0,
        });
    }
    let n = r.n;
    let mid = (n + 1.0) / 2.0;
    let s: f64 = r
        .mean_ranks
        .iter()
        .zip(&r.sizes)
        .map(|(m, &k)| k as f64 * (m - mid).powi(2))
        .sum();
    let h = 12.0 / (n * (n + 1.0)) * s / correction;
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(KruskalWallis {
        h,
        df,
        p_value: chi.sf(h),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DunnPair {
    pub a: usize,
    pub b: usize,
    pub z: f64,
    pub p_value: f64,
    /// Bonferroni-adjusted over all `k(k−1)/2` pairs, capped at 1.
    pub p_adjusted: f64,
}

/// Dunn's pairwise comparisons of mean ranks with tie-corrected variance.
pub fn dunn_posthoc(groups: &[Vec<f64>]) -> Result<Vec<DunnPair>> {
    let r = rank_groups(groups)?;
    let k = groups.len();
    let m = (k * (k - 1) / 2) as f64;
    let n = r.n;
    let sigma2 = n * (n + 1.0) / 12.0 - r.ties / (12.0 * (n - 1.0));
    let mut out = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let se = (sigma2 * (1.0 / r.sizes[a] as f64 + 1.0 / r.sizes[b] as f64)).sqrt();
            let diff = r.mean_ranks[a] - r.mean_ranks[b];
            let z = if se > 0.0 { diff / se } else { 0.0 };
            let p = two_sided_normal_p(z);
            out.push(DunnPair {
                a,
                b,
                z,
                p_value: p,
                p_adjusted: (p * m).min(1.0),
            });
        }
    }
    Ok(out)
}

/// Product-limit survival estimate as a right-continuous step function: `survival[i]` holds
/// on `[times[i], times[i + 1])`. The first point is `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    pub fn at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|&x| x <= t);
        self.survival[i.saturating_sub(1)]
    }
}

pub fn kaplan_meier(times: &[f64], events: &[bool]) -> KmCurve {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut curve = KmCurve {
        times: vec![0.0],
        survival: vec![1.0],
        at_risk: vec![times.len()],
        events: vec![0],
    };
    let mut s = 1.0;
    let mut at_risk = times.len();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let (mut d, mut c) = (0, 0);
        while i < order.len() && times[order[i]] == t {
            if events[order[i]] {
                d += 1;
            } else {
                c += 1;
            }
            i += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(d);
        }
        at_risk -= d + c;
    }
    curve
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRank {
    /// Indexed by group label 0 and 1.
    pub curves: [KmCurve; 2],
    pub observed: [f64; 2],
    pub expected: [f64; 2],
    pub variance: f64,
    pub chi2: f64,
    pub p_value: f64,
    /// Groups (0 or 1) without any event.
    pub zero_event_groups: Vec<usize>,
}

/// Kaplan–Meier curves per group and the log-rank chi-square (1 df). `groups[i]` is 0 or 1.
pub fn km_logrank(times: &[f64], events: &[bool], groups: &[usize]) -> Result<LogRank> {
    if times.len() != events.len() || times.len() != groups.len() {
        return Err(Error::Shape("times, events and groups differ in length".into()));
    }
    if let Some(t) = times.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::InvalidArgument(format!("survival time {t} is not positive")));
    }
    if groups.iter().any(|&g| g > 1) {
        return Err(Error::InvalidArgument("log-rank compares exactly two groups (0, 1)".into()));
    }
    let pick = |g: usize| -> (Vec<f64>, Vec<bool>) {
        (0..times.len()).filter(|&i| groups[i] == g).map(|i| (times[i], events[i])).unzip()
    };
    let (t0, e0) = pick(0);
    let (t1, e1) = pick(1);
    if t0.is_empty() || t1.is_empty() {
        return Err(Error::Empty("log-rank group".into()));
    }

    let mut distinct: Vec<f64> = (0..times.len()).filter(|&i| events[i]).map(|i| times[i]).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let (mut o1, mut e1_sum, mut var) = (0.0, 0.0, 0.0);
    let mut o0 = 0.0;
    for &t in &distinct {
        let n0 = t0.iter().filter(|&&x| x >= t).count() as f64;
        let n1 = t1.iter().filter(|&&x| x >= t).count() as f64;
        let d0 = (0..t0.len()).filter(|&i| e0[i] && t0[i] == t).count() as f64;
        let d1 = (0..t1.len()).filter(|&i| e1[i] && t1[i] == t).count() as f64;
        let (n, d) = (n0 + n1, d0 + d1);
        o0 += d0;
        o1 += d1;
        e1_sum += d * n1 / n;
        if n > 1.0 {
            var += n0 * n1 * d * (n - d) / (n * n * (n - 1.0));
        }
    }
    let total_events = o0 + o1;
    let (chi2, p) = if var > 0.0 {
        let chi2 = (o1 - e1_sum).powi(2) / var;
        let dist = ChiSquared::new(1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        (chi2, dist.sf(chi2))
    } else {
        (0.0, 1.0)
    };
    let zero_event_groups = [(0, o0), (1, o1)]
        .into_iter()
        .filter(|(_, o)| *o == 0.0)
        .map(|(g, _)| g)
        .collect();
    Ok(LogRank {
        curves: [kaplan_meier(&t0, &e0), kaplan_meier(&t1, &e1)],
        observed: [o0, o1],
        expected: [total_events - e1_sum, e1_sum],
        variance: var,
        chi2,
        p_value: p,
        zero_event_groups,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianSplit<T> {
    pub median: f64,
    /// Strictly above the median.
    pub high: Vec<T>,
    pub low: Vec<T>,
    /// Set when no subject lies above the median (for example, all values equal).
    pub high_empty: bool,
}

/// Splits subjects at the median value: `> median` is high, `≤ median` is low.
pub fn stratify_by_median<T: Clone>(values: &[f64], subjects: &[T]) -> Result<MedianSplit<T>> {
    if values.len() != subjects.len() {
        return Err(Error::Shape("values and subjects differ in length".into()));
    }
    if values.len() < 2 {
        return Err(Error::InvalidArgument("median split needs at least two subjects".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("median split input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let (mut high, mut low) = (Vec::new(), Vec::new());
    for (v, s) in values.iter().zip(subjects) {
        if *v > median {
            high.push(s.clone());
        } else {
            low.push(s.clone());
        }
    }
    Ok(MedianSplit {
        median,
        high_empty: high.is_empty(),
        high,
        low,
    })
}
