use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::bag::{Label, SectionKind, SlideMeta};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

pub const NUM_FOLDS: usize = 5;

/// Patient-grouped assignment of slides to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub num_folds: usize,
    /// wsi_id → fold index.
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, wsi_id: &str) -> Option<usize> {
        self.assignments.get(wsi_id).copied()
    }

    /// Slide ids in `fold` (validation split).
    pub fn validation_ids(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn training_ids(&self, fold: usize) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, f)| **f != fold)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

#[derive(Default, Clone, Copy)]
struct Counts {
    slides: f64,
    frozen: f64,
    paraffin: f64,
    stas: f64,
    non_stas: f64,
}

impl Counts {
    fn add(&mut self, s: &SlideMeta) {
        self.slides += 1.0;
        match s.section_kind {
            SectionKind::Frozen => self.frozen += 1.0,
            SectionKind::Paraffin => self.paraffin += 1.0,
        }
        match s.label {
            Label::Stas => self.stas += 1.0,
            Label::NonStas => self.non_stas += 1.0,
        }
    }

    fn plus(mut self, other: &Counts) -> Counts {
        self.slides += other.slides;
        self.frozen += other.frozen;
        self.paraffin += other.paraffin;
        self.stas += other.stas;
        self.non_stas += other.non_stas;
        self
    }

    fn deviation(&self, target: &Counts) -> f64 {
        let sq = |a: f64, b: f64| (a - b) * (a - b);
        sq(self.slides, target.slides)
            + sq(self.frozen, target.frozen)
            + sq(self.paraffin, target.paraffin)
            + sq(self.stas, target.stas)
            + sq(self.non_stas, target.non_stas)
    }
}

/// Shuffles patients with `seed`, then assigns each to the fold whose slide, section-kind and
/// label counts move closest to an even share of the cohort totals.
pub fn make_folds(cohort: &[SlideMeta], seed: u64) -> Result<FoldPlan> {
    make_folds_k(cohort, seed, NUM_FOLDS)
}

pub fn make_folds_k(cohort: &[SlideMeta], seed: u64, k: usize) -> Result<FoldPlan> {
    if k == 0 {
        return Err(Error::InvalidArgument("fold count must be positive".into()));
    }
    let mut patients: BTreeMap<&str, Vec<&SlideMeta>> = BTreeMap::new();
    for s in cohort {
        patients.entry(s.patient_id.as_str()).or_default().push(s);
    }
    if patients.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} patients cannot fill {k} folds",
            patients.len()
        )));
    }
    let mut order: Vec<(&str, Counts)> = patients
        .iter()
        .map(|(p, slides)| {
            let mut c = Counts::default();
            slides.iter().for_each(|s| c.add(s));
            (*p, c)
        })
        .collect();
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut order);

    let mut total = Counts::default();
    cohort.iter().for_each(|s| total.add(s));
    let share = 1.0 / k as f64;
    let target = Counts {
        slides: total.slides * share,
        frozen: total.frozen * share,
        paraffin: total.paraffin * share,
        stas: total.stas * share,
        non_stas: total.non_stas * share,
    };

    let mut folds = vec![Counts::default(); k];
    let mut patient_fold: BTreeMap<&str, usize> = BTreeMap::new();
    for (pid, c) in &order {
        let mut best = 0;
        let mut best_cost = f64::INFINITY;
        for (f, fc) in folds.iter().enumerate() {
            let cost = fc.plus(c).deviation(&target) - fc.deviation(&target);
            if cost < best_cost {
                best_cost = cost;
                best = f;
            }
        }
        folds[best] = folds[best].plus(c);
        patient_fold.insert(pid, best);
    }

    // Greedy placement cannot leave a fold empty while it still has fewer slides than
    // target, but guard anyway: move a patient from the fold with the most patients.
    loop {
        let mut members = vec![Vec::new(); k];
        for (pid, f) in &patient_fold {
            members[*f].push(*pid);
        }
        let Some(empty) = members.iter().position(Vec::is_empty) else {
            break;
        };
        let donor = (0..k).max_by_key(|f| (members[*f].len(), k - f)).unwrap();
        let moved = members[donor][0];
        patient_fold.insert(moved, empty);
    }

    let assignments = cohort
        .iter()
        .map(|s| (s.wsi_id.clone(), patient_fold[s.patient_id.as_str()]))
        .collect();
    Ok(FoldPlan {
        seed,
        num_folds: k,
        assignments,
    })
}
