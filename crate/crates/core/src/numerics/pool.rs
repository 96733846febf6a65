//! Adaptive max pooling along the token axis.
//!
//! Bin `i` of `T` over `N` inputs covers `[floor(i·N/T), ceil((i+1)·N/T))`. When `N < T`
//! consecutive bins often share the same range and therefore produce identical tokens;
//! [`PooledRuns`] stores each distinct range once with its multiplicity.

use super::Tensor;
use crate::error::{Error, Result};

pub fn bin_range(bin: usize, n: usize, target: usize) -> (usize, usize) {
    let start = bin * n / target;
    let end = ((bin + 1) * n).div_ceil(target);
    (start, end)
}

/// Fully expanded pooling output: `target` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSequence {
    pub tokens: Tensor,
    /// Per bin, the input index whose token has the largest L2 norm inside the bin.
    pub provenance: Vec<usize>,
    /// Per bin and feature, the input index that supplied the max (`target × F`, row-major).
    pub argmax: Vec<usize>,
}

/// Pooling output grouped into runs of bins that cover the same input range.
#[derive(Debug, Clone)]
pub struct PooledRuns {
    pub tokens: Tensor,
    pub counts: Vec<usize>,
    pub ranges: Vec<(usize, usize)>,
    pub provenance: Vec<usize>,
    pub argmax: Vec<usize>,
    pub target: usize,
    pub input_len: usize,
}

fn pool_range(x: &Tensor, start: usize, end: usize, token: &mut [f64], argmax: &mut [usize]) {
    let f = x.cols();
    token.copy_from_slice(x.row(start));
    argmax.iter_mut().for_each(|a| *a = start);
    for r in start + 1..end {
        let row = x.row(r);
        for j in 0..f {
            if row[j] > token[j] {
                token[j] = row[j];
                argmax[j] = r;
            }
        }
    }
}

fn norm_argmax(x: &Tensor, start: usize, end: usize) -> usize {
    let mut best = start;
    let mut best_norm = f64::NEG_INFINITY;
    for r in start..end {
        let n: f64 = x.row(r).iter().map(|v| v * v).sum();
        if n > best_norm {
            best_norm = n;
            best = r;
        }
    }
    best
}

fn check(x: &Tensor, target: usize) -> Result<()> {
    if x.rows() == 0 || x.is_empty() {
        return Err(Error::Empty("adaptive_max_pool input".into()));
    }
    if target == 0 {
        return Err(Error::InvalidArgument("pool target must be >= 1".into()));
    }
    Ok(())
}

pub fn adaptive_max_pool(x: &Tensor, target: usize) -> Result<PooledSequence> {
    check(x, target)?;
    let (n, f) = (x.rows(), x.cols());
    let mut tokens = vec![0.0; target * f];
    let mut argmax = vec![0; target * f];
    let mut provenance = Vec::with_capacity(target);
    for bin in 0..target {
        let (s, e) = bin_range(bin, n, target);
        pool_range(
            x,
            s,
            e,
            &mut tokens[bin * f..(bin + 1) * f],
            &mut argmax[bin * f..(bin + 1) * f],
        );
        provenance.push(norm_argmax(x, s, e));
    }
    Ok(PooledSequence {
        tokens: Tensor::from_parts(vec![target, f], tokens),
        provenance,
        argmax,
    })
}

pub fn adaptive_max_pool_runs(x: &Tensor, target: usize) -> Result<PooledRuns> {
    check(x, target)?;
    let (n, f) = (x.rows(), x.cols());
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for bin in 0..target {
        let r = bin_range(bin, n, target);
        if ranges.last() == Some(&r) {
            *counts.last_mut().unwrap() += 1;
        } else {
            ranges.push(r);
            counts.push(1);
        }
    }
    let u = ranges.len();
    let mut tokens = vec![0.0; u * f];
    let mut argmax = vec![0; u * f];
    let mut provenance = Vec::with_capacity(u);
    for (k, &(s, e)) in ranges.iter().enumerate() {
        pool_range(
            x,
            s,
            e,
            &mut tokens[k * f..(k + 1) * f],
            &mut argmax[k * f..(k + 1) * f],
        );
        provenance.push(norm_argmax(x, s, e));
    }
    Ok(PooledRuns {
        tokens: Tensor::from_parts(vec![u, f], tokens),
        counts,
        ranges,
        provenance,
        argmax,
        target,
        input_len: n,
    })
}

impl PooledRuns {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn expand(&self) -> PooledSequence {
        let f = self.tokens.cols();
        let mut tokens = Vec::with_capacity(self.target * f);
        let mut argmax = Vec::with_capacity(self.target * f);
        let mut provenance = Vec::with_capacity(self.target);
        for (k, &c) in self.counts.iter().enumerate() {
            for _ in 0..c {
                tokens.extend_from_slice(self.tokens.row(k));
                argmax.extend_from_slice(&self.argmax[k * f..(k + 1) * f]);
                provenance.push(self.provenance[k]);
            }
        }
        PooledSequence {
            tokens: Tensor::from_parts(vec![self.target, f], tokens),
            provenance,
            argmax,
        }
    }

    /// Routes a gradient on the pooled run tokens back to the `input_len × F` input.
    pub fn backward(&self, d_tokens: &Tensor) -> Tensor {
        let f = self.tokens.cols();
        let mut dx = Tensor::zeros(&[self.input_len, f]);
        for k in 0..self.len() {
            let g = d_tokens.row(k);
            for j in 0..f {
                dx.data_mut()[self.argmax[k * f + j] * f + j] += g[j];
            }
        }
        dx
    }
}
