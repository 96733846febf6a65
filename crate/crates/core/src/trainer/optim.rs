use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::numerics::{ParamSet, Tensor};

/// Adaptive-moment optimizer with decoupled weight decay. The decay term is scaled by the
/// learning rate, so `lr = 0` leaves parameters untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut g_list: Vec<Vec<f64>> = Vec::new();
        grads.visit(&mut |_, g| g_list.push(g.data().to_vec()));
        let mut ms = take_all(&mut self.m);
        let mut vs = take_all(&mut self.v);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut i = 0;
        params.visit_mut(&mut |_, p| {
            let g = &g_list[i];
            let m = ms[i].data_mut();
            let v = vs[i].data_mut();
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * wd * *theta;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            i += 1;
        });
        put_all(&mut self.m, ms);
        put_all(&mut self.v, vs);
    }
}

fn take_all(p: &mut ModelParams) -> Vec<Tensor> {
    let mut out = Vec::new();
    p.visit_mut(&mut |_, t| out.push(std::mem::replace(t, Tensor::zeros(&[0]))));
    out
}

fn put_all(p: &mut ModelParams, tensors: Vec<Tensor>) {
    let mut it = tensors.into_iter();
    p.visit_mut(&mut |_, t| *t = it.next().expect("same parameter layout"));
}

/// Multiplies the learning rate by `factor` once the monitored loss has failed to improve by
/// a relative `threshold` for more than `patience` consecutive epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Plateau {
            lr,
            factor,
            patience,
            threshold,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Returns true when the learning rate was reduced.
    pub fn observe(&mut self, loss: f64) -> bool {
        if !self.best.is_finite() || loss < self.best - self.threshold * self.best.abs() {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}

/// Rescales `grads` to global norm `max_norm` if it is larger; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
