//! Multi-scale graph convolution: three independent branches (small-scale tiles, large-scale
//! tiles, TME cells), each two stages of SAGE mean aggregation → LeakyReLU → LayerNorm → Dropout.

use super::params::{ModelConfig, MsgcParams, SageParams};
use crate::error::{Error, Result};
use crate::graphs::{BagGraphs, SpatialGraph};
use crate::numerics::ops::{
    dropout_mask, hadamard, layer_norm, layer_norm_backward, leaky_relu,
    leaky_relu_backward, linear, linear_backward, LayerNormCache,
};
use crate::numerics::{SeededRng, Tensor};

/// Mean over the node itself and its out-neighbours.
pub fn mean_aggregate(graph: &SpatialGraph, h: &Tensor) -> Result<Tensor> {
    let n = graph.num_nodes();
    if h.rows() != n {
        return Err(Error::Shape(format!("{} feature rows for {} nodes", h.rows(), n)));
    }
    let f = h.cols();
    let mut out = vec![0.0; n * f];
    for v in 0..n {
        let row = &mut out[v * f..(v + 1) * f];
        row.copy_from_slice(h.row(v));
        for u in graph.neighbors(v) {
            for (o, x) in row.iter_mut().zip(h.row(u)) {
                *o += x;
            }
        }
        let inv = 1.0 / (1 + graph.out_degree(v)) as f64;
        row.iter_mut().for_each(|o| *o *= inv);
    }
    Ok(Tensor::from_parts(vec![n, f], out))
}

pub fn mean_aggregate_backward(graph: &SpatialGraph, d_agg: &Tensor) -> Tensor {
    let (n, f) = (d_agg.rows(), d_agg.cols());
    let mut dh = vec![0.0; n * f];
    for v in 0..n {
        let inv = 1.0 / (1 + graph.out_degree(v)) as f64;
        let g = d_agg.row(v);
        for (d, x) in dh[v * f..(v + 1) * f].iter_mut().zip(g) {
            *d += x * inv;
        }
        for u in graph.neighbors(v) {
            for (d, x) in dh[u * f..(u + 1) * f].iter_mut().zip(g) {
                *d += x * inv;
            }
        }
    }
    Tensor::from_parts(vec![n, f], dh)
}

/// `LeakyReLU(W · mean({h_v} ∪ {h_u : u ∈ N(v)}) + b)` for every node.
pub fn sage_conv(graph: &SpatialGraph, h: &Tensor, p: &SageParams, slope: f64) -> Result<Tensor> {
    let agg = mean_aggregate(graph, h)?;
    let pre = linear(&agg, &p.weight, Some(&p.bias))?;
    Ok(leaky_relu(&pre, slope))
}

#[derive(Debug, Clone)]
struct StageCache {
    agg: Tensor,
    pre: Tensor,
    ln: LayerNormCache,
    mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    stages: Vec<StageCache>,
}

#[derive(Debug, Clone)]
pub struct MsgcCache {
    branches: Vec<BranchCache>,
}

pub fn branch_forward(
    graph: &SpatialGraph,
    stages: &[SageParams; 2],
    cfg: &ModelConfig,
    rng: &mut SeededRng,
    training: bool,
) -> Result<(Tensor, BranchCache)> {
    let mut h = graph.node_features.clone();
    let mut caches = Vec::with_capacity(2);
    for p in stages {
        if h.cols() != p.weight.cols() {
            return Err(Error::Shape(format!(
                "{:?} branch input width {} vs weight {:?}",
                graph.scale,
                h.cols(),
                p.weight.shape()
            )));
        }
        let agg = mean_aggregate(graph, &h)?;
        let pre = linear(&agg, &p.weight, Some(&p.bias))?;
        let act = leaky_relu(&pre, cfg.leaky_slope);
        let (normed, ln) = layer_norm(&act, cfg.ln_eps, &p.ln_gain, &p.ln_shift)?;
        let mask = dropout_mask(normed.shape(), cfg.dropout, rng, training)?;
        let out = hadamard(&normed, &mask);
        caches.push(StageCache {
            agg,
            pre,
            ln,
            mask,
        });
        h = out;
    }
    Ok((h, BranchCache { stages: caches }))
}

fn branch_backward(
    graph: &SpatialGraph,
    stages: &[SageParams; 2],
    cache: &BranchCache,
    d_out: &Tensor,
    grads: &mut [SageParams; 2],
    slope: f64,
) {
    let mut d = d_out.clone();
    for s in (0..2).rev() {
        let c = &cache.stages[s];
        let p = &stages[s];
        let g = &mut grads[s];
        let d_norm = hadamard(&d, &c.mask);
        let d_act = layer_norm_backward(&c.ln, &p.ln_gain, &d_norm, &mut g.ln_gain, &mut g.ln_shift);
        let d_pre = leaky_relu_backward(&c.pre, &d_act, slope);
        // stage-0 inputs are data; their gradient is never needed
        let d_agg = linear_backward(&c.agg, &p.weight, &d_pre, &mut g.weight, Some(&mut g.bias), s > 0);
        if let Some(d_agg) = d_agg {
            d = mean_aggregate_backward(graph, &d_agg);
        }
    }
}

/// Runs the three branches. Each branch draws dropout masks from its own stream forked from
/// `rng` in branch order, so the branches are independent of execution order.
pub fn msgc_forward(
    graphs: &BagGraphs,
    params: &MsgcParams,
    cfg: &ModelConfig,
    rng: &mut SeededRng,
    training: bool,
) -> Result<([Tensor; 3], MsgcCache)> {
    let inputs = [&graphs.small, &graphs.large, &graphs.tme];
    let mut outs = Vec::with_capacity(3);
    let mut caches = Vec::with_capacity(3);
    for (b, g) in inputs.iter().enumerate() {
        let mut branch_rng = rng.fork();
        let (o, c) = branch_forward(g, &params.branches[b], cfg, &mut branch_rng, training)?;
        outs.push(o);
        caches.push(c);
    }
    let outs: [Tensor; 3] = outs.try_into().expect("three branches");
    Ok((outs, MsgcCache { branches: caches }))
}

pub fn msgc_backward(
    graphs: &BagGraphs,
    params: &MsgcParams,
    cache: &MsgcCache,
    d_outs: &[Tensor; 3],
    grads: &mut MsgcParams,
    cfg: &ModelConfig,
) {
    let inputs = [&graphs.small, &graphs.large, &graphs.tme];
    for b in 0..3 {
        branch_backward(
            inputs[b],
            &params.branches[b],
            &cache.branches[b],
            &d_outs[b],
            &mut grads.branches[b],
            cfg.leaky_slope,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{build_knn_graph, GraphScale};

    fn graph(feats: Tensor, coords: Vec<[f64; 2]>, k: usize) -> SpatialGraph {
        let edges = build_knn_graph(&coords, k);
        SpatialGraph::new(feats, coords, edges, GraphScale::Small).unwrap()
    }

    #[test]
    fn aggregate_includes_self() {
        let feats = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g = graph(feats.clone(), vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 2);
        let agg = mean_aggregate(&g, &feats).unwrap();
        assert!((agg.row(0)[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((agg.row(0)[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn aggregate_of_identical_neighbours() {
        let x = vec![0.3, -1.2, 4.0];
        let feats = Tensor::from_rows(&vec![x.clone(); 4]).unwrap();
        let g = graph(feats.clone(), vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]], 3);
        let agg = mean_aggregate(&g, &feats).unwrap();
        for v in 0..4 {
            for (a, b) in agg.row(v).iter().zip(&x) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn isolated_node_keeps_own_features() {
        let feats = Tensor::from_rows(&[vec![2.0, 5.0]]).unwrap();
        let g = graph(feats.clone(), vec![[0.0, 0.0]], 9);
        assert_eq!(mean_aggregate(&g, &feats).unwrap(), feats);
    }
}
