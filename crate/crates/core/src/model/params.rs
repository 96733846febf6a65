use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, SeededRng, Tensor};

/// Architecture hyperparameters. Defaults reproduce the published model dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub tme_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Per-head query/key width M and value width D (M = D).
    pub head_dim: usize,
    pub dam_layers: usize,
    /// Pooled token counts for the large-scale, small-scale and TME branches, in that order.
    pub pool_lengths: [usize; 3],
    pub expert_dim: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub leaky_slope: f64,
    pub ln_eps: f64,
    pub dropout: f64,
    pub knn_k: usize,
    pub norm_floor: f64,
    /// Weights of the logged per-layer energy diagnostic.
    pub energy: super::expert::EnergyParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: crate::dataset::FEATURE_DIM,
            tme_dim: crate::graphs::TME_FEATURE_DIM,
            hidden: 256,
            heads: 8,
            head_dim: 32,
            dam_layers: 2,
            pool_lengths: [512, 2048, 2048],
            expert_dim: 128,
            head_hidden: 64,
            num_classes: 2,
            leaky_slope: crate::numerics::ops::DEFAULT_LEAKY_SLOPE,
            ln_eps: crate::numerics::ops::DEFAULT_LN_EPS,
            dropout: 0.2,
            knn_k: crate::graphs::DEFAULT_K,
            norm_floor: 1e-12,
            energy: Default::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads * self.head_dim != self.hidden {
            return Err(Error::InvalidArgument(format!(
                "heads ({}) x head_dim ({}) must equal hidden ({})",
                self.heads, self.head_dim, self.hidden
            )));
        }
        if self.head_dim < 2 {
            // unit-normalized 1-d heads are ±1, so a query can be antipodal to every key and the
            // attention normalizer (q̃·Σk̃ + L) collapses to zero
            return Err(Error::InvalidArgument("head_dim must be at least 2".into()));
        }
        if 2 * self.expert_dim != self.hidden {
            // the head concatenates two expert embeddings into one hidden-width vector
            return Err(Error::InvalidArgument(format!(
                "two expert embeddings of {} must concatenate to hidden width {}",
                self.expert_dim, self.hidden
            )));
        }
        if self.num_classes != 2 {
            return Err(Error::InvalidArgument("only binary heads are supported".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::InvalidArgument("dropout and slope must lie in [0, 1)".into()));
        }
        if self.energy.alpha < 0.0 || self.energy.beta < 0.0 {
            return Err(Error::InvalidArgument("energy weights must be non-negative".into()));
        }
        if self.pool_lengths.contains(&0) || self.dam_layers == 0 {
            return Err(Error::InvalidArgument("pool lengths and depth must be positive".into()));
        }
        Ok(())
    }

    /// Pooled sequence length `L` seen by the diffusion attention.
    pub fn token_count(&self) -> usize {
        self.pool_lengths.iter().sum()
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut t = Tensor::zeros(&[rows, cols]);
    t.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.uniform_range(-a, a));
    t
}

/// One SAGE stage: linear map after mean aggregation, then LayerNorm affine.
#[derive(Debug, Clone, PartialEq)]
pub struct SageParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub ln_gain: Tensor,
    pub ln_shift: Tensor,
}

impl SageParams {
    fn init(d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        SageParams {
            weight: xavier(d_out, d_in, rng),
            bias: Tensor::zeros(&[d_out]),
            ln_gain: Tensor::ones(&[d_out]),
            ln_shift: Tensor::zeros(&[d_out]),
        }
    }
}

/// Branch order everywhere: small-scale, large-scale, TME.
#[derive(Debug, Clone, PartialEq)]
pub struct MsgcParams {
    pub branches: [[SageParams; 2]; 3],
}

pub const BRANCH_NAMES: [&str; 3] = ["small", "large", "tme"];

#[derive(Debug, Clone, PartialEq)]
pub struct DamLayerParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub layers: Vec<DamLayerParams>,
    /// Scoring direction applied to unit-normalized tokens.
    pub score: Tensor,
    pub agg_weight: Tensor,
    pub agg_bias: Tensor,
}

impl ExpertParams {
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        let h = cfg.hidden;
        let layers = (0..cfg.dam_layers)
            .map(|_| DamLayerParams {
                w_q: xavier(h, h, rng),
                w_k: xavier(h, h, rng),
                w_v: xavier(h, h, rng),
            })
            .collect();
        let mut score = Tensor::zeros(&[h]);
        let a = 1.0 / (h as f64).sqrt();
        score
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.uniform_range(-a, a));
        ExpertParams {
            layers,
            score,
            agg_weight: xavier(cfg.expert_dim, h, rng),
            agg_bias: Tensor::zeros(&[cfg.expert_dim]),
        }
    }
}

/// Classifier: `W2 · Dropout(W1 · LayerNorm([x1, x2] + b1)) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub pre_bias: Tensor,
    pub ln_gain: Tensor,
    pub ln_shift: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl HeadParams {
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        HeadParams {
            pre_bias: Tensor::zeros(&[cfg.hidden]),
            ln_gain: Tensor::ones(&[cfg.hidden]),
            ln_shift: Tensor::zeros(&[cfg.hidden]),
            w1: xavier(cfg.head_hidden, cfg.hidden, rng),
            w2: xavier(cfg.num_classes, cfg.head_hidden, rng),
            b2: Tensor::zeros(&[cfg.num_classes]),
        }
    }
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub msgc: MsgcParams,
    pub experts: [ExpertParams; 2],
    pub head: HeadParams,
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, unit LayerNorm gains, drawn from `seed` in a fixed
    /// order (MSGC branches, expert 1, expert 2, head).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed);
        let h = cfg.hidden;
        let branch = |d_in: usize, rng: &mut SeededRng| {
            [SageParams::init(d_in, h, rng), SageParams::init(h, h, rng)]
        };
        let msgc = MsgcParams {
            branches: [
                branch(cfg.feature_dim, &mut rng),
                branch(cfg.feature_dim, &mut rng),
                branch(cfg.tme_dim, &mut rng),
            ],
        };
        let e1 = ExpertParams::init(cfg, &mut rng);
        let e2 = ExpertParams::init(cfg, &mut rng);
        let head = HeadParams::init(cfg, &mut rng);
        Ok(ModelParams {
            msgc,
            experts: [e1, e2],
            head,
        })
    }

    pub fn global_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit(&mut |_, t| s += t.sum_sq());
        s.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, t| t.scale(factor));
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.all_finite());
        ok
    }
}

fn visit_sage(prefix: &str, p: &SageParams, f: &mut dyn FnMut(&str, &Tensor)) {
    f(&format!("{prefix}.weight"), &p.weight);
    f(&format!("{prefix}.bias"), &p.bias);
    f(&format!("{prefix}.ln_gain"), &p.ln_gain);
    f(&format!("{prefix}.ln_shift"), &p.ln_shift);
}

fn visit_sage_mut(prefix: &str, p: &mut SageParams, f: &mut dyn FnMut(&str, &mut Tensor)) {
    f(&format!("{prefix}.weight"), &mut p.weight);
    f(&format!("{prefix}.bias"), &mut p.bias);
    f(&format!("{prefix}.ln_gain"), &mut p.ln_gain);
    f(&format!("{prefix}.ln_shift"), &mut p.ln_shift);
}

impl ParamSet for MsgcParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (b, stages) in self.branches.iter().enumerate() {
            for (s, p) in stages.iter().enumerate() {
                visit_sage(&format!("msgc.{}.{}", BRANCH_NAMES[b], s), p, f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (b, stages) in self.branches.iter_mut().enumerate() {
            for (s, p) in stages.iter_mut().enumerate() {
                visit_sage_mut(&format!("msgc.{}.{}", BRANCH_NAMES[b], s), p, f);
            }
        }
    }
}

impl ExpertParams {
    pub(crate) fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("{prefix}.dam{i}.w_q"), &l.w_q);
            f(&format!("{prefix}.dam{i}.w_k"), &l.w_k);
            f(&format!("{prefix}.dam{i}.w_v"), &l.w_v);
        }
        f(&format!("{prefix}.score"), &self.score);
        f(&format!("{prefix}.agg_weight"), &self.agg_weight);
        f(&format!("{prefix}.agg_bias"), &self.agg_bias);
    }

    pub(crate) fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("{prefix}.dam{i}.w_q"), &mut l.w_q);
            f(&format!("{prefix}.dam{i}.w_k"), &mut l.w_k);
            f(&format!("{prefix}.dam{i}.w_v"), &mut l.w_v);
        }
        f(&format!("{prefix}.score"), &mut self.score);
        f(&format!("{prefix}.agg_weight"), &mut self.agg_weight);
        f(&format!("{prefix}.agg_bias"), &mut self.agg_bias);
    }
}

impl ParamSet for ExpertParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit_named("expert", f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_named_mut("expert", f)
    }
}

impl ParamSet for HeadParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("head.pre_bias", &self.pre_bias);
        f("head.ln_gain", &self.ln_gain);
        f("head.ln_shift", &self.ln_shift);
        f("head.w1", &self.w1);
        f("head.w2", &self.w2);
        f("head.b2", &self.b2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("head.pre_bias", &mut self.pre_bias);
        f("head.ln_gain", &mut self.ln_gain);
        f("head.ln_shift", &mut self.ln_shift);
        f("head.w1", &mut self.w1);
        f("head.w2", &mut self.w2);
        f("head.b2", &mut self.b2);
    }
}

impl ParamSet for ModelParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.msgc.visit(f);
        self.experts[0].visit_named("expert1", f);
        self.experts[1].visit_named("expert2", f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.msgc.visit_mut(f);
        self.experts[0].visit_named_mut("expert1", f);
        self.experts[1].visit_named_mut("expert2", f);
        self.head.visit_mut(f);
    }
}
