//! Full model: MSGC, two experts, head, and the combined objective with its gradient.

use super::expert::{expert_backward, expert_forward, ExpertCache, ExpertOutput};
use super::head::{head_backward, head_forward, HeadCache};
use super::losses::{
    consistency_mse, cross_entropy, supcon_anchor, total_loss, ContrastiveQueue, LossComponents,
    LossWeights,
};
use super::msgc::{msgc_backward, msgc_forward, MsgcCache};
use super::params::{ModelConfig, ModelParams};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::graphs::BagGraphs;
use crate::numerics::ops::softmax;
use crate::numerics::{ParamSet, SeededRng};

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: [f64; 2],
    /// Class probabilities `(non-STAS, STAS)`.
    pub probs: [f64; 2],
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub z: Vec<f64>,
    pub experts: [ExpertOutput; 2],
}

impl ForwardOutput {
    pub fn stas_probability(&self) -> f64 {
        self.probs[Label::Stas.index()]
    }

    pub fn predicted(&self, threshold: f64) -> Label {
        if self.stas_probability() >= threshold {
            Label::Stas
        } else {
            Label::NonStas
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    msgc: MsgcCache,
    branch_shapes: [(usize, usize); 3],
    experts: [ExpertCache; 2],
    head: HeadCache,
}

/// Dropout masks come from streams forked off `rng`: three for the MSGC branches, then one
/// for the head.
pub fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    graphs: &BagGraphs,
    rng: &mut SeededRng,
    training: bool,
) -> Result<(ForwardOutput, ForwardCache)> {
    let (branches, msgc) = msgc_forward(graphs, &params.msgc, cfg, rng, training)?;
    let branch_shapes = [0, 1, 2].map(|b| (branches[b].rows(), branches[b].cols()));
    let (o1, c1) = expert_forward(&branches, &params.experts[0], cfg)?;
    let (o2, c2) = expert_forward(&branches, &params.experts[1], cfg)?;
    let mut head_rng = rng.fork();
    let (h, head) = head_forward(&o1.embedding, &o2.embedding, &params.head, cfg, &mut head_rng, training)?;
    if !h.logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("model logits".into()));
    }
    let p = softmax(&h.logits);
    Ok((
        ForwardOutput {
            logits: h.logits,
            probs: [p[0], p[1]],
            x1: o1.embedding.clone(),
            x2: o2.embedding.clone(),
            z: h.z,
            experts: [o1, o2],
        },
        ForwardCache {
            msgc,
            branch_shapes,
            experts: [c1, c2],
            head,
        },
    ))
}

/// Inference forward (dropout off).
pub fn predict(params: &ModelParams, cfg: &ModelConfig, graphs: &BagGraphs) -> Result<ForwardOutput> {
    Ok(forward(params, cfg, graphs, &mut SeededRng::new(0), false)?.0)
}

/// Upstream gradients entering the backward pass.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub logits: [f64; 2],
    pub z: Vec<f64>,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
}

pub fn backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    graphs: &BagGraphs,
    cache: &ForwardCache,
    upstream: &OutputGrads,
) -> ModelParams {
    let mut g = params.zeros_like();
    let (mut d1, mut d2) = head_backward(
        &cache.head,
        &params.head,
        &mut g.head,
        upstream.logits,
        &upstream.z,
        cfg.expert_dim,
    );
    for (d, u) in d1.iter_mut().zip(&upstream.x1) {
        *d += u;
    }
    for (d, u) in d2.iter_mut().zip(&upstream.x2) {
        *d += u;
    }
    let mut d_branches = expert_backward(
        &cache.experts[0],
        &params.experts[0],
        &mut g.experts[0],
        &d1,
        cache.branch_shapes,
        cfg,
    );
    let db2 = expert_backward(
        &cache.experts[1],
        &params.experts[1],
        &mut g.experts[1],
        &d2,
        cache.branch_shapes,
        cfg,
    );
    for (a, b) in d_branches.iter_mut().zip(&db2) {
        a.add_assign(b);
    }
    msgc_backward(graphs, &params.msgc, &cache.msgc, &d_branches, &mut g.msgc, cfg);
    g
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub components: LossComponents,
    pub total: f64,
    pub grads: ModelParams,
    pub output: ForwardOutput,
}

fn loss_terms(
    out: &ForwardOutput,
    label: Label,
    queue: &ContrastiveQueue,
    w: &LossWeights,
) -> Result<(LossComponents, OutputGrads)> {
    let (sc, d_z) = supcon_anchor(&out.z, label, queue, w.tau);
    let (mse, d_mse) = consistency_mse(&out.x1, &out.x2)?;
    let (ce, d_ce) = cross_entropy(&out.logits, label);
    let grads = OutputGrads {
        logits: [w.gamma * d_ce[0], w.gamma * d_ce[1]],
        z: d_z.iter().map(|v| w.lambda * v).collect(),
        x1: d_mse.iter().map(|v| w.beta * v).collect(),
        x2: d_mse.iter().map(|v| -w.beta * v).collect(),
    };
    Ok((LossComponents { supcon: sc, mse, ce }, grads))
}

/// Weighted objective for one bag and its gradient. Queue entries are constants.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grad(
    params: &ModelParams,
    cfg: &ModelConfig,
    graphs: &BagGraphs,
    label: Label,
    queue: &ContrastiveQueue,
    weights: &LossWeights,
    rng: &mut SeededRng,
    training: bool,
) -> Result<StepResult> {
    let (output, cache) = forward(params, cfg, graphs, rng, training)?;
    let (components, upstream) = loss_terms(&output, label, queue, weights)?;
    let total = total_loss(&components, weights)?;
    if !total.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = backward(params, cfg, graphs, &cache, &upstream);
    Ok(StepResult {
        components,
        total,
        grads,
        output,
    })
}

/// Objective without gradient, dropout off.
pub fn loss_value(
    params: &ModelParams,
    cfg: &ModelConfig,
    graphs: &BagGraphs,
    label: Label,
    queue: &ContrastiveQueue,
    weights: &LossWeights,
) -> Result<(LossComponents, f64, ForwardOutput)> {
    let out = predict(params, cfg, graphs)?;
    let (c, _) = loss_terms(&out, label, queue, weights)?;
    let total = total_loss(&c, weights)?;
    Ok((c, total, out))
}
