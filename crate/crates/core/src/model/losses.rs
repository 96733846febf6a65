//! Training objective: supervised contrastive, expert consistency and cross-entropy terms.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::numerics::ops::{dot, log_sum_exp, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub queue_capacity: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.2,
            beta: 0.2,
            gamma: 0.6,
            tau: 0.07,
            queue_capacity: 64,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!("loss weight {name}={v} outside (0, 1)")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {} must be positive", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub supcon: f64,
    pub mse: f64,
    pub ce: f64,
}

/// `λ·SupCon + β·MSE + γ·CE`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.lambda * c.supcon + w.beta * c.mse + w.gamma * c.ce)
}

/// Batch supervised contrastive loss over unit-norm embeddings. Anchors without positives are
/// skipped; the result is the mean over the remaining anchors (zero if none remain).
pub fn supcon_loss(embeddings: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::Shape("one label per embedding required".into()));
    }
    if embeddings.len() < 2 {
        return Err(Error::InvalidArgument("supcon needs at least two embeddings".into()));
    }
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..embeddings.len() {
        let others: Vec<usize> = (0..embeddings.len()).filter(|&a| a != i).collect();
        let sims: Vec<f64> = others
            .iter()
            .map(|&a| dot(&embeddings[i], &embeddings[a]) / tau)
            .collect();
        let lse = log_sum_exp(&sims);
        let pos: Vec<f64> = others
            .iter()
            .zip(&sims)
            .filter(|(&a, _)| labels[a] == labels[i])
            .map(|(_, &s)| s - lse)
            .collect();
        if pos.is_empty() {
            continue;
        }
        total += -pos.iter().sum::<f64>() / pos.len() as f64;
        anchors += 1;
    }
    Ok(if anchors == 0 { 0.0 } else { total / anchors as f64 })
}

/// Contrastive term for one anchor against a bank of constant entries, with its gradient.
pub fn supcon_anchor(
    z: &[f64],
    label: Label,
    bank: &ContrastiveQueue,
    tau: f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; z.len()];
    let n_pos = bank.entries.iter().filter(|(_, l)| *l == label).count();
    if n_pos == 0 {
        return (0.0, grad);
    }
    let sims: Vec<f64> = bank.entries.iter().map(|(e, _)| dot(z, e) / tau).collect();
    let lse = log_sum_exp(&sims);
    let probs = softmax(&sims);
    let inv_p = 1.0 / n_pos as f64;
    let mut loss = 0.0;
    for ((entry, l), (s, pr)) in bank.entries.iter().zip(sims.iter().zip(&probs)) {
        let coef = if *l == label {
            loss -= (s - lse) * inv_p;
            pr - inv_p
        } else {
            *pr
        };
        for (g, e) in grad.iter_mut().zip(entry) {
            *g += coef * e / tau;
        }
    }
    (loss, grad)
}

/// `(1/n) Σ (x1 − x2)²` and its gradient with respect to `x1` (the `x2` gradient is the
/// negation).
pub fn consistency_mse(x1: &[f64], x2: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x1.len() != x2.len() || x1.is_empty() {
        return Err(Error::Shape(format!("mse operands {} vs {}", x1.len(), x2.len())));
    }
    let n = x1.len() as f64;
    let diff: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| a - b).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.iter().map(|d| 2.0 * d / n).collect()))
}

/// `−log softmax(logits)[label]` and its gradient.
pub fn cross_entropy(logits: &[f64; 2], label: Label) -> (f64, [f64; 2]) {
    let lse = log_sum_exp(logits);
    let y = label.index();
    let p = softmax(logits);
    let mut g = [p[0], p[1]];
    g[y] -= 1.0;
    (lse - logits[y], g)
}

/// FIFO bank of recent detached contrastive embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveQueue {
    capacity: usize,
    entries: VecDeque<(Vec<f64>, Label)>,
}

impl ContrastiveQueue {
    pub fn new(capacity: usize) -> Self {
        ContrastiveQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, z: Vec<f64>, label: Label) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((z, label));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &(Vec<f64>, Label)> {
        self.entries.iter()
    }
}
