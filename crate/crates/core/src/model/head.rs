//! Two-class head over the concatenated expert embeddings.

use super::params::{HeadParams, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::ops::{
    dropout_mask, hadamard, layer_norm, layer_norm_backward, linear, linear_backward,
    LayerNormCache,
};
use crate::numerics::{SeededRng, Tensor};

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub logits: [f64; 2],
    /// Unit-normalized pre-classifier representation, the contrastive embedding.
    pub z: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    ln: LayerNormCache,
    ln_out: Tensor,
    ln_norm: f64,
    hidden: Tensor,
    mask: Tensor,
}

pub fn head_forward(
    x1: &[f64],
    x2: &[f64],
    p: &HeadParams,
    cfg: &ModelConfig,
    rng: &mut SeededRng,
    training: bool,
) -> Result<(HeadOutput, HeadCache)> {
    if x1.len() + x2.len() != p.pre_bias.len() {
        return Err(Error::Shape(format!(
            "embeddings {}+{} vs head width {}",
            x1.len(),
            x2.len(),
            p.pre_bias.len()
        )));
    }
    let mut cat: Vec<f64> = x1.iter().chain(x2).copied().collect();
    for (c, b) in cat.iter_mut().zip(p.pre_bias.data()) {
        *c += b;
    }
    let x = Tensor::from_parts(vec![1, cat.len()], cat);
    let (ln_out, ln) = layer_norm(&x, cfg.ln_eps, &p.ln_gain, &p.ln_shift)?;
    let hidden_pre = linear(&ln_out, &p.w1, None)?;
    let mask = dropout_mask(hidden_pre.shape(), cfg.dropout, rng, training)?;
    let hidden = hadamard(&hidden_pre, &mask);
    let logits = linear(&hidden, &p.w2, Some(&p.b2))?;
    let ln_norm = ln_out.sum_sq().sqrt().max(cfg.norm_floor);
    let z = ln_out.data().iter().map(|v| v / ln_norm).collect();
    Ok((
        HeadOutput {
            logits: [logits.data()[0], logits.data()[1]],
            z,
        },
        HeadCache {
            ln,
            ln_out,
            ln_norm,
            hidden,
            mask,
        },
    ))
}

/// Logits only.
pub fn classify(
    x1: &[f64],
    x2: &[f64],
    p: &HeadParams,
    cfg: &ModelConfig,
    rng: &mut SeededRng,
    training: bool,
) -> Result<[f64; 2]> {
    Ok(head_forward(x1, x2, p, cfg, rng, training)?.0.logits)
}

/// Returns `(d_x1, d_x2)` from gradients on the logits and on the contrastive embedding.
pub fn head_backward(
    c: &HeadCache,
    p: &HeadParams,
    g: &mut HeadParams,
    d_logits: [f64; 2],
    d_z: &[f64],
    split: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dl = Tensor::from_parts(vec![1, 2], d_logits.to_vec());
    let d_hidden = linear_backward(&c.hidden, &p.w2, &dl, &mut g.w2, Some(&mut g.b2), true).unwrap();
    let d_pre = hadamard(&d_hidden, &c.mask);
    let mut d_ln = linear_backward(&c.ln_out, &p.w1, &d_pre, &mut g.w1, None, true).unwrap();
    if d_z.iter().any(|v| *v != 0.0) {
        let z: Vec<f64> = c.ln_out.data().iter().map(|v| v / c.ln_norm).collect();
        let proj: f64 = z.iter().zip(d_z).map(|(a, b)| a * b).sum();
        for ((o, zi), dz) in d_ln.data_mut().iter_mut().zip(&z).zip(d_z) {
            *o += (dz - zi * proj) / c.ln_norm;
        }
    }
    let dx = layer_norm_backward(&c.ln, &p.ln_gain, &d_ln, &mut g.ln_gain, &mut g.ln_shift);
    for (gb, d) in g.pre_bias.data_mut().iter_mut().zip(dx.data()) {
        *gb += d;
    }
    let dx = dx.into_data();
    (dx[..split].to_vec(), dx[split..].to_vec())
}
