//! Diffusion attention expert.
//!
//! Branch outputs are max-pooled to fixed lengths, concatenated, passed through stacked
//! diffusion-attention layers with residual updates, and reduced to a bag embedding by an
//! attention-weighted mean.
//!
//! Internally the pooled sequence is kept in run form: consecutive bins that cover the same
//! input range produce identical tokens, and identical tokens stay identical through every
//! layer (each update depends only on the token itself and on sequence-wide sums). A run of
//! `c` identical tokens is stored once with weight `c`; every sequence-wide sum is weighted
//! accordingly, which gives the same result as running on the expanded sequence.

use serde::{Deserialize, Serialize};

use super::params::{DamLayerParams, ExpertParams, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::ops::{dot, linear, linear_backward};
use crate::numerics::{adaptive_max_pool_runs, PooledRuns, Tensor};

/// Bias added to the attention normalizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum BiasPolicy {
    /// Bias equals the key count `L`, making the per-query weights `(q̃·k̃ + 1) / Σ(q̃·k̃ + 1)`.
    #[default]
    TokenCount,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

/// Splits each row into `heads` blocks and scales every block to unit L2 norm.
fn normalize_heads(x: &Tensor, heads: usize, floor: f64) -> (Tensor, Vec<f64>) {
    let (n, width) = (x.rows(), x.cols());
    let m = width / heads;
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(n * heads);
    for r in 0..n {
        let row = out.row_mut(r);
        for h in 0..heads {
            let block = &mut row[h * m..(h + 1) * m];
            let nrm = dot(block, block).sqrt().max(floor);
            block.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
    }
    (out, norms)
}

fn normalize_heads_backward(
    xn: &Tensor,
    norms: &[f64],
    d_xn: &Tensor,
    heads: usize,
    floor: f64,
) -> Tensor {
    let (n, width) = (xn.rows(), xn.cols());
    let m = width / heads;
    let mut dx = d_xn.clone();
    for r in 0..n {
        let xr = xn.row(r);
        let dr = dx.row_mut(r);
        for h in 0..heads {
            let nrm = norms[r * heads + h];
            let xb = &xr[h * m..(h + 1) * m];
            let db = &mut dr[h * m..(h + 1) * m];
            if nrm > floor {
                let proj = dot(xb, db);
                for (d, x) in db.iter_mut().zip(xb) {
                    *d = (*d - x * proj) / nrm;
                }
            } else {
                db.iter_mut().for_each(|d| *d /= nrm);
            }
        }
    }
    dx
}

/// Intermediate tensors of one attention evaluation.
#[derive(Debug, Clone)]
struct AttnCore {
    qn: Tensor,
    kn: Tensor,
    v: Tensor,
    /// `H × M × D`
    kv: Vec<f64>,
    /// `H × M`
    ksum: Vec<f64>,
    /// `U × H`
    den: Vec<f64>,
    /// per-head outputs, `U × H × D`
    y: Vec<f64>,
}

/// Streaming (linear-cost) attention over weighted tokens. `qn`, `kn` are head-normalized.
fn attention_core(
    qn: Tensor,
    kn: Tensor,
    v: Tensor,
    weights: &[f64],
    heads: usize,
    bias: f64,
) -> AttnCore {
    let u = qn.rows();
    let m = qn.cols() / heads;
    let d = v.cols() / heads;
    let mut kv = vec![0.0; heads * m * d];
    let mut ksum = vec![0.0; heads * m];
    let mut vsum = vec![0.0; heads * d];
    for l in 0..kn.rows() {
        let w = weights[l];
        let kr = kn.row(l);
        let vr = v.row(l);
        for h in 0..heads {
            let kb = &kr[h * m..(h + 1) * m];
            let vb = &vr[h * d..(h + 1) * d];
            for (mi, &kval) in kb.iter().enumerate() {
                let wk = w * kval;
                ksum[h * m + mi] += wk;
                let dst = &mut kv[(h * m + mi) * d..(h * m + mi + 1) * d];
                for (o, &vv) in dst.iter_mut().zip(vb) {
                    *o += wk * vv;
                }
            }
            for (o, &vv) in vsum[h * d..(h + 1) * d].iter_mut().zip(vb) {
                *o += w * vv;
            }
        }
    }
    let mut den = vec![0.0; u * heads];
    let mut y = vec![0.0; u * heads * d];
    let mut num = vec![0.0; d];
    for n in 0..u {
        let qr = qn.row(n);
        for h in 0..heads {
            let qb = &qr[h * m..(h + 1) * m];
            num.copy_from_slice(&vsum[h * d..(h + 1) * d]);
            let mut dn = bias;
            for (mi, &qv) in qb.iter().enumerate() {
                dn += qv * ksum[h * m + mi];
                let src = &kv[(h * m + mi) * d..(h * m + mi + 1) * d];
                for (o, &s) in num.iter_mut().zip(src) {
                    *o += qv * s;
                }
            }
            den[n * heads + h] = dn;
            let out = &mut y[(n * heads + h) * d..(n * heads + h + 1) * d];
            for (o, &nv) in out.iter_mut().zip(&num) {
                *o = nv / dn;
            }
        }
    }
    AttnCore {
        qn,
        kn,
        v,
        kv,
        ksum,
        den,
        y,
    }
}

/// Returns `(d_qn, d_kn, d_v)` given the gradient on per-head outputs.
fn attention_core_backward(
    c: &AttnCore,
    d_y: &[f64],
    weights: &[f64],
    heads: usize,
) -> (Tensor, Tensor, Tensor) {
    let u = c.qn.rows();
    let m = c.qn.cols() / heads;
    let d = c.v.cols() / heads;
    let mut d_qn = Tensor::zeros(c.qn.shape());
    let mut d_kv = vec![0.0; heads * m * d];
    let mut d_ksum = vec![0.0; heads * m];
    let mut d_vsum = vec![0.0; heads * d];
    let mut d_num = vec![0.0; d];
    for n in 0..u {
        let qr = c.qn.row(n);
        let dqr = d_qn.row_mut(n);
        for h in 0..heads {
            let dn = c.den[n * heads + h];
            let yb = &c.y[(n * heads + h) * d..(n * heads + h + 1) * d];
            let dyb = &d_y[(n * heads + h) * d..(n * heads + h + 1) * d];
            let d_den = -dot(dyb, yb) / dn;
            for (o, g) in d_num.iter_mut().zip(dyb) {
                *o = g / dn;
            }
            for (o, g) in d_vsum[h * d..(h + 1) * d].iter_mut().zip(&d_num) {
                *o += g;
            }
            for mi in 0..m {
                let qv = qr[h * m + mi];
                let kvrow = &c.kv[(h * m + mi) * d..(h * m + mi + 1) * d];
                dqr[h * m + mi] = dot(&d_num, kvrow) + d_den * c.ksum[h * m + mi];
                d_ksum[h * m + mi] += d_den * qv;
                let dst = &mut d_kv[(h * m + mi) * d..(h * m + mi + 1) * d];
                for (o, g) in dst.iter_mut().zip(&d_num) {
                    *o += qv * g;
                }
            }
        }
    }
    let mut d_kn = Tensor::zeros(c.kn.shape());
    let mut d_v = Tensor::zeros(c.v.shape());
    for l in 0..c.kn.rows() {
        let w = weights[l];
        let kr = c.kn.row(l);
        let vr = c.v.row(l);
        let dkr = d_kn.row_mut(l);
        for h in 0..heads {
            for mi in 0..m {
                let dkv = &d_kv[(h * m + mi) * d..(h * m + mi + 1) * d];
                dkr[h * m + mi] = w * (dot(dkv, &vr[h * d..(h + 1) * d]) + d_ksum[h * m + mi]);
            }
        }
        let dvr = d_v.row_mut(l);
        for h in 0..heads {
            for di in 0..d {
                let mut s = d_vsum[h * d + di];
                for mi in 0..m {
                    s += kr[h * m + mi] * d_kv[(h * m + mi) * d + di];
                }
                dvr[h * d + di] = w * s;
            }
        }
    }
    (d_qn, d_kn, d_v)
}

fn resolve_bias(policy: BiasPolicy, weights: &[f64]) -> f64 {
    match policy {
        BiasPolicy::TokenCount => weights.iter().sum(),
        BiasPolicy::Fixed(b) => b,
    }
}

/// Per-head attention outputs (`N × H × D`, row-major) for already-projected `q`, `k`, `v`.
pub fn diffusion_attention_heads(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    bias: BiasPolicy,
    floor: f64,
) -> Result<Vec<f64>> {
    if q.cols() % heads != 0 || k.cols() != q.cols() || v.cols() % heads != 0 || k.rows() != v.rows()
    {
        return Err(Error::Shape("attention projections inconsistent with head count".into()));
    }
    if k.rows() == 0 {
        return Err(Error::Empty("attention keys".into()));
    }
    let weights = vec![1.0; k.rows()];
    let (qn, _) = normalize_heads(q, heads, floor);
    let (kn, _) = normalize_heads(k, heads, floor);
    let b = resolve_bias(bias, &weights);
    Ok(attention_core(qn, kn, v.clone(), &weights, heads, b).y)
}

fn head_mean_tiled(y: &[f64], u: usize, heads: usize, d: usize) -> Tensor {
    let mut out = Tensor::zeros(&[u, heads * d]);
    let inv = 1.0 / heads as f64;
    for n in 0..u {
        let mut mean = vec![0.0; d];
        for h in 0..heads {
            for (o, v) in mean.iter_mut().zip(&y[(n * heads + h) * d..(n * heads + h + 1) * d]) {
                *o += v;
            }
        }
        mean.iter_mut().for_each(|v| *v *= inv);
        let row = out.row_mut(n);
        for h in 0..heads {
            row[h * d..(h + 1) * d].copy_from_slice(&mean);
        }
    }
    out
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Tensor,
    q_norms: Vec<f64>,
    k_norms: Vec<f64>,
    core: AttnCore,
}

fn dam_layer_weighted(
    z: &Tensor,
    weights: &[f64],
    p: &DamLayerParams,
    cfg: &ModelConfig,
    bias: BiasPolicy,
) -> Result<(Tensor, LayerCache)> {
    let q = linear(z, &p.w_q, None)?;
    let k = linear(z, &p.w_k, None)?;
    let v = linear(z, &p.w_v, None)?;
    let (qn, q_norms) = normalize_heads(&q, cfg.heads, cfg.norm_floor);
    let (kn, k_norms) = normalize_heads(&k, cfg.heads, cfg.norm_floor);
    let b = resolve_bias(bias, weights);
    let core = attention_core(qn, kn, v, weights, cfg.heads, b);
    let d = core.v.cols() / cfg.heads;
    let mut out = head_mean_tiled(&core.y, z.rows(), cfg.heads, d);
    out.add_assign(z);
    Ok((
        out,
        LayerCache {
            input: z.clone(),
            q_norms,
            k_norms,
            core,
        },
    ))
}

fn dam_layer_backward(
    c: &LayerCache,
    weights: &[f64],
    p: &DamLayerParams,
    g: &mut DamLayerParams,
    d_out: &Tensor,
    cfg: &ModelConfig,
) -> Tensor {
    let heads = cfg.heads;
    let u = d_out.rows();
    let d = c.core.v.cols() / heads;
    let inv = 1.0 / heads as f64;
    let mut d_y = vec![0.0; u * heads * d];
    for n in 0..u {
        let row = d_out.row(n);
        let mut d_mean = vec![0.0; d];
        for h in 0..heads {
            for (o, v) in d_mean.iter_mut().zip(&row[h * d..(h + 1) * d]) {
                *o += v;
            }
        }
        for h in 0..heads {
            for (o, v) in d_y[(n * heads + h) * d..(n * heads + h + 1) * d]
                .iter_mut()
                .zip(&d_mean)
            {
                *o = v * inv;
            }
        }
    }
    let (d_qn, d_kn, d_v) = attention_core_backward(&c.core, &d_y, weights, heads);
    let d_q = normalize_heads_backward(&c.core.qn, &c.q_norms, &d_qn, heads, cfg.norm_floor);
    let d_k = normalize_heads_backward(&c.core.kn, &c.k_norms, &d_kn, heads, cfg.norm_floor);
    let mut dz = d_out.clone();
    for (dp, w, gw) in [
        (&d_q, &p.w_q, &mut g.w_q),
        (&d_k, &p.w_k, &mut g.w_k),
        (&d_v, &p.w_v, &mut g.w_v),
    ] {
        let dx = linear_backward(&c.input, w, dp, gw, None, true).unwrap();
        dz.add_assign(&dx);
    }
    dz
}

/// Diffusion attention over a token sequence (all tokens weight one). Output rows are the
/// head-averaged attention result, repeated across the head blocks of the value layout.
pub fn diffusion_attention(
    tokens: &Tensor,
    p: &DamLayerParams,
    cfg: &ModelConfig,
    bias: BiasPolicy,
) -> Result<Tensor> {
    let weights = vec![1.0; tokens.rows()];
    let (out, _) = dam_layer_weighted(tokens, &weights, p, cfg, bias)?;
    let mut attn = out;
    let neg = tokens.clone();
    for (a, b) in attn.data_mut().iter_mut().zip(neg.data()) {
        *a -= b;
    }
    Ok(attn)
}

/// Residual update `tokens + diffusion_attention(tokens)`.
pub fn dam_layer(tokens: &Tensor, p: &DamLayerParams, cfg: &ModelConfig) -> Result<Tensor> {
    let weights = vec![1.0; tokens.rows()];
    Ok(dam_layer_weighted(tokens, &weights, p, cfg, BiasPolicy::TokenCount)?.0)
}

/// Same as [`dam_layer`] for a run-compressed sequence where token `i` stands for
/// `weights[i]` identical tokens.
pub fn dam_layer_runs(
    tokens: &Tensor,
    weights: &[f64],
    p: &DamLayerParams,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    Ok(dam_layer_weighted(tokens, weights, p, cfg, BiasPolicy::TokenCount)?.0)
}

/// `α Σ_i ‖z_i − z'_i‖² + β Σ_{i,j} ‖z_i − z'_j‖²`.
pub fn energy(z: &Tensor, z_prev: &Tensor, p: &EnergyParams) -> Result<f64> {
    let w = vec![1.0; z.rows()];
    energy_weighted(z, z_prev, &w, p)
}

/// Energy of the expanded sequence described by run weights. The pairwise term uses
/// `Σ_{i,j}‖a_i − b_j‖² = W Σ w‖a‖² + W Σ w‖b‖² − 2 (Σ w a)·(Σ w b)`.
pub fn energy_weighted(z: &Tensor, z_prev: &Tensor, w: &[f64], p: &EnergyParams) -> Result<f64> {
    if z.shape() != z_prev.shape() {
        return Err(Error::Shape("energy operands differ in shape".into()));
    }
    let f = z.cols();
    let total: f64 = w.iter().sum();
    let mut local = 0.0;
    let (mut sa, mut sb) = (0.0, 0.0);
    let mut ma = vec![0.0; f];
    let mut mb = vec![0.0; f];
    for i in 0..z.rows() {
        let (a, b) = (z.row(i), z_prev.row(i));
        local += w[i] * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        sa += w[i] * dot(a, a);
        sb += w[i] * dot(b, b);
        for j in 0..f {
            ma[j] += w[i] * a[j];
            mb[j] += w[i] * b[j];
        }
    }
    let pair = total * sa + total * sb - 2.0 * dot(&ma, &mb);
    Ok(p.alpha * local + p.beta * pair.max(0.0))
}

/// Pooled tokens in concatenation order (large-scale, small-scale, TME).
#[derive(Debug, Clone)]
pub struct PooledTokens {
    pub tokens: Tensor,
    /// Per token: (branch in concatenation order, input row index attaining the max token norm).
    pub provenance: Vec<(usize, usize)>,
}

/// Branch-index mapping from concatenation order to MSGC order (small, large, tme).
pub const CONCAT_TO_MSGC: [usize; 3] = [1, 0, 2];

fn pool_runs(
    branch_outputs: &[Tensor; 3],
    cfg: &ModelConfig,
) -> Result<Vec<PooledRuns>> {
    CONCAT_TO_MSGC
        .iter()
        .zip(cfg.pool_lengths)
        .map(|(&b, len)| {
            let x = &branch_outputs[b];
            if x.rows() == 0 {
                return Err(Error::Empty(format!("branch {} has no nodes", super::BRANCH_NAMES[b])));
            }
            adaptive_max_pool_runs(x, len)
        })
        .collect()
}

/// Pools each MSGC branch output (given in MSGC order) to its fixed length and concatenates.
pub fn pool_and_concat(branch_outputs: &[Tensor; 3], cfg: &ModelConfig) -> Result<PooledTokens> {
    let runs = pool_runs(branch_outputs, cfg)?;
    let f = branch_outputs[0].cols();
    let mut data = Vec::with_capacity(cfg.token_count() * f);
    let mut provenance = Vec::with_capacity(cfg.token_count());
    for (ci, r) in runs.iter().enumerate() {
        let full = r.expand();
        data.extend_from_slice(full.tokens.data());
        provenance.extend(full.provenance.iter().map(|&i| (ci, i)));
    }
    Ok(PooledTokens {
        tokens: Tensor::from_parts(vec![provenance.len(), f], data),
        provenance,
    })
}

/// What one expert produces for a bag.
#[derive(Debug, Clone)]
pub struct ExpertOutput {
    pub embedding: Vec<f64>,
    /// Attention of one pooled token in each run; run `i` covers `runs` weight many tokens.
    pub run_attention: Vec<f64>,
    /// Pooling runs per branch, concatenation order.
    pub runs: Vec<PooledRuns>,
    /// Energy diagnostic after each diffusion layer.
    pub energies: Vec<f64>,
}

impl ExpertOutput {
    /// Attention for each of the `L` pooled tokens (sums to one).
    pub fn token_attention(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut k = 0;
        for r in &self.runs {
            for &c in &r.counts {
                out.extend(std::iter::repeat_n(self.run_attention[k], c));
                k += 1;
            }
        }
        out
    }

    /// Per branch (concatenation order): `(input index, attention)` pairs obtained by routing
    /// each pooled token's attention to its provenance input.
    pub fn routed_attention(&self) -> Vec<Vec<f64>> {
        let mut k = 0;
        self.runs
            .iter()
            .map(|r| {
                let mut acc = vec![0.0; r.input_len];
                for (i, &c) in r.counts.iter().enumerate() {
                    acc[r.provenance[i]] += c as f64 * self.run_attention[k];
                    k += 1;
                }
                acc
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExpertCache {
    weights: Vec<f64>,
    layers: Vec<LayerCache>,
    final_tokens: Tensor,
    norms: Vec<f64>,
    unit: Tensor,
    attention: Vec<f64>,
    pooled: Vec<f64>,
    runs: Vec<PooledRuns>,
}

pub fn expert_forward(
    branch_outputs: &[Tensor; 3],
    p: &ExpertParams,
    cfg: &ModelConfig,
) -> Result<(ExpertOutput, ExpertCache)> {
    let runs = pool_runs(branch_outputs, cfg)?;
    let f = cfg.hidden;
    let mut data = Vec::new();
    let mut weights = Vec::new();
    for r in &runs {
        if r.tokens.cols() != f {
            return Err(Error::Shape(format!("branch width {} vs hidden {f}", r.tokens.cols())));
        }
        data.extend_from_slice(r.tokens.data());
        weights.extend(r.counts.iter().map(|&c| c as f64));
    }
    let u = weights.len();
    let mut z = Tensor::from_parts(vec![u, f], data);
    let mut layers = Vec::with_capacity(p.layers.len());
    let mut energies = Vec::with_capacity(p.layers.len());
    for lp in &p.layers {
        let (next, cache) = dam_layer_weighted(&z, &weights, lp, cfg, BiasPolicy::TokenCount)?;
        energies.push(energy_weighted(&next, &z, &weights, &cfg.energy)?);
        layers.push(cache);
        z = next;
    }

    // attention-weighted mean with logits from unit-normalized tokens
    let mut norms = Vec::with_capacity(u);
    let mut unit = z.clone();
    for i in 0..u {
        let row = unit.row_mut(i);
        let nrm = dot(row, row).sqrt().max(cfg.norm_floor);
        row.iter_mut().for_each(|v| *v /= nrm);
        norms.push(nrm);
    }
    let logits: Vec<f64> = (0..u).map(|i| dot(unit.row(i), p.score.data())).collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|s| (s - mx).exp()).collect();
    let total: f64 = e.iter().zip(&weights).map(|(a, w)| a * w).sum();
    let attention: Vec<f64> = e.iter().map(|a| a / total).collect();
    let mut pooled = vec![0.0; f];
    for i in 0..u {
        let c = weights[i] * attention[i];
        for (o, v) in pooled.iter_mut().zip(z.row(i)) {
            *o += c * v;
        }
    }
    let pooled_t = Tensor::from_parts(vec![1, f], pooled.clone());
    let emb = linear(&pooled_t, &p.agg_weight, Some(&p.agg_bias))?;
    Ok((
        ExpertOutput {
            embedding: emb.into_data(),
            run_attention: attention.clone(),
            runs: runs.clone(),
            energies,
        },
        ExpertCache {
            weights,
            layers,
            final_tokens: z,
            norms,
            unit,
            attention,
            pooled,
            runs,
        },
    ))
}

/// Accumulates parameter gradients and returns gradients for the three branch outputs
/// (MSGC order).
pub fn expert_backward(
    c: &ExpertCache,
    p: &ExpertParams,
    g: &mut ExpertParams,
    d_embedding: &[f64],
    branch_shapes: [(usize, usize); 3],
    cfg: &ModelConfig,
) -> [Tensor; 3] {
    let f = cfg.hidden;
    let u = c.weights.len();
    let d_emb = Tensor::from_parts(vec![1, d_embedding.len()], d_embedding.to_vec());
    let pooled_t = Tensor::from_parts(vec![1, f], c.pooled.clone());
    let d_pooled = linear_backward(&pooled_t, &p.agg_weight, &d_emb, &mut g.agg_weight, Some(&mut g.agg_bias), true)
        .unwrap();
    let d_pooled = d_pooled.data();

    let z = &c.final_tokens;
    let mut dz = Tensor::zeros(&[u, f]);
    let mut d_att = vec![0.0; u];
    for i in 0..u {
        let wa = c.weights[i] * c.attention[i];
        for (o, v) in dz.row_mut(i).iter_mut().zip(d_pooled) {
            *o = wa * v;
        }
        d_att[i] = c.weights[i] * dot(z.row(i), d_pooled);
    }
    // weighted softmax: ∂a_n/∂s_j = a_n(δ_nj − w_j a_j)
    let s_bar: f64 = d_att.iter().zip(&c.attention).map(|(d, a)| d * a).sum();
    for i in 0..u {
        let a = c.attention[i];
        let ds = a * d_att[i] - c.weights[i] * a * s_bar;
        let unit = c.unit.row(i);
        for (gs, x) in g.score.data_mut().iter_mut().zip(unit) {
            *gs += ds * x;
        }
        let du: Vec<f64> = p.score.data().iter().map(|s| ds * s).collect();
        let nrm = c.norms[i];
        let proj = dot(unit, &du);
        let row = dz.row_mut(i);
        if nrm > cfg.norm_floor {
            for j in 0..f {
                row[j] += (du[j] - unit[j] * proj) / nrm;
            }
        } else {
            for j in 0..f {
                row[j] += du[j] / nrm;
            }
        }
    }

    for (li, lc) in c.layers.iter().enumerate().rev() {
        dz = dam_layer_backward(lc, &c.weights, &p.layers[li], &mut g.layers[li], &dz, cfg);
    }

    let mut out: [Tensor; 3] = [
        Tensor::zeros(&[branch_shapes[0].0, branch_shapes[0].1]),
        Tensor::zeros(&[branch_shapes[1].0, branch_shapes[1].1]),
        Tensor::zeros(&[branch_shapes[2].0, branch_shapes[2].1]),
    ];
    let mut offset = 0;
    for (ci, r) in c.runs.iter().enumerate() {
        let len = r.len();
        let slice = Tensor::from_parts(vec![len, f], dz.data()[offset * f..(offset + len) * f].to_vec());
        out[CONCAT_TO_MSGC[ci]] = r.backward(&slice);
        offset += len;
    }
    out
}
