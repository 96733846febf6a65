use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, AdamW, Plateau};
use crate::dataset::{Label, WsiBag};
use crate::error::{Error, Result};
use crate::graphs::BagGraphs;
use crate::metrics::roc_auc;
use crate::model::{loss_and_grad, loss_value, ContrastiveQueue, LossWeights, ModelConfig, ModelParams};
use crate::numerics::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Bags per optimizer step; only 1 is supported.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Decision threshold on the STAS probability.
    pub threshold: f64,
    /// Re-score the training split in inference mode after each epoch.
    pub eval_train: bool,
    pub model: ModelConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 100,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            plateau_factor: 0.5,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            clip_norm: 5.0,
            seed: 0,
            threshold: 0.5,
            eval_train: true,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size != 1 {
            return Err(Error::InvalidArgument("batch_size must be 1".into()));
        }
        let positive = [
            ("lr", self.lr >= 0.0),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("eps", self.eps > 0.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("plateau_factor", self.plateau_factor > 0.0 && self.plateau_factor <= 1.0),
            ("clip_norm", self.clip_norm > 0.0),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, ok)| !ok) {
            return Err(Error::InvalidArgument(format!("train config field {name} out of range")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_supcon: f64,
    pub train_mse: f64,
    pub train_ce: f64,
    pub train_accuracy: Option<f64>,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_auc: Option<f64>,
    /// Steps whose gradient norm exceeded the clip threshold.
    pub clipped_steps: usize,
    pub max_grad_norm: f64,
    /// Mean energy diagnostic per expert and diffusion layer over the epoch's training steps.
    pub energy: Vec<Vec<f64>>,
    pub lr_reduced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub params: ModelParams,
    pub epoch: usize,
    pub val_loss: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub scheduler: Plateau,
    pub queue: ContrastiveQueue,
    pub rng: SeededRng,
    pub best: Option<BestSnapshot>,
    pub log: Vec<EpochLog>,
}

impl TrainState {
    /// Fresh state. Parameter initialization draws its seed from the head of the run's stream.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(cfg.seed);
        let params = ModelParams::init(&cfg.model, rng.next_u64())?;
        let optimizer = AdamW::new(&params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
        Ok(TrainState {
            epoch: 0,
            optimizer,
            scheduler: Plateau::new(
                cfg.lr,
                cfg.plateau_factor,
                cfg.plateau_patience,
                cfg.plateau_threshold,
            ),
            queue: ContrastiveQueue::new(cfg.loss.queue_capacity),
            rng,
            best: None,
            log: Vec::new(),
            params,
        })
    }

    /// Best-validation parameters if any epoch finished, else the current ones.
    pub fn inference_params(&self) -> &ModelParams {
        self.best.as_ref().map_or(&self.params, |b| &b.params)
    }
}

/// Prepared split: graphs are built once per bag.
pub struct Split {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub graphs: Vec<BagGraphs>,
}

impl Split {
    pub fn new(bags: &[WsiBag], k: usize) -> Result<Self> {
        Ok(Split {
            ids: bags.iter().map(|b| b.wsi_id.clone()).collect(),
            labels: bags.iter().map(|b| b.label).collect(),
            graphs: bags.iter().map(|b| BagGraphs::from_bag(b, k)).collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Inference-mode STAS probabilities for every bag in `split`.
pub fn score_split(params: &ModelParams, cfg: &ModelConfig, split: &Split) -> Result<Vec<f64>> {
    split
        .graphs
        .iter()
        .map(|g| Ok(crate::model::predict(params, cfg, g)?.stas_probability()))
        .collect()
}

fn accuracy(probs: &[f64], labels: &[Label], threshold: f64) -> f64 {
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, l)| (**p >= threshold) == (**l == Label::Stas))
        .count();
    hits as f64 / probs.len().max(1) as f64
}

fn auc_if_defined(probs: &[f64], labels: &[Label]) -> Option<f64> {
    let y: Vec<bool> = labels.iter().map(|l| *l == Label::Stas).collect();
    roc_auc(probs, &y).ok()
}

pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub train: &'a Split,
    pub val: &'a Split,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, train: &'a Split, val: &'a Split) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Empty("training and validation splits must be non-empty".into()));
        }
        Ok(Trainer { config, train, val })
    }

    /// One epoch: shuffled single-bag steps, then validation and scheduling.
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<EpochLog> {
        let cfg = self.config;
        let epoch = state.epoch;
        let lr = state.scheduler.lr;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        state.rng.shuffle(&mut order);
        let n_layers = cfg.model.dam_layers;
        let mut energy = vec![vec![0.0; n_layers]; 2];
        let (mut sum_total, mut sum_sc, mut sum_mse, mut sum_ce) = (0.0, 0.0, 0.0, 0.0);
        let mut clipped = 0;
        let mut max_norm: f64 = 0.0;
        for &i in &order {
            let mut step_rng = state.rng.fork();
            let label = self.train.labels[i];
            let diverged = |detail: String| Error::Diverged {
                epoch,
                wsi_id: self.train.ids[i].clone(),
                detail,
            };
            let mut step = loss_and_grad(
                &state.params,
                &cfg.model,
                &self.train.graphs[i],
                label,
                &state.queue,
                &cfg.loss,
                &mut step_rng,
                true,
            )
            .map_err(|e| match e {
                Error::NonFinite(what) => diverged(format!("non-finite {what}")),
                other => other,
            })?;
            let norm = clip_global_norm(&mut step.grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(diverged("non-finite gradient norm".into()));
            }
            if norm > cfg.clip_norm {
                clipped += 1;
            }
            max_norm = max_norm.max(norm);
            state.optimizer.update(&mut state.params, &step.grads, lr);
            state.queue.push(step.output.z.clone(), label);
            sum_total += step.total;
            sum_sc += step.components.supcon;
            sum_mse += step.components.mse;
            sum_ce += step.components.ce;
            for (e, out) in step.output.experts.iter().enumerate() {
                for (l, v) in out.energies.iter().enumerate() {
                    energy[e][l] += v;
                }
            }
        }
        let n = self.train.len() as f64;
        energy.iter_mut().flatten().for_each(|v| *v /= n);

        let train_accuracy = if cfg.eval_train {
            let p = score_split(&state.params, &cfg.model, self.train)?;
            Some(accuracy(&p, &self.train.labels, cfg.threshold))
        } else {
            None
        };
        let mut val_loss = 0.0;
        let mut val_probs = Vec::with_capacity(self.val.len());
        for (g, &label) in self.val.graphs.iter().zip(&self.val.labels) {
            let (_, total, out) = loss_value(&state.params, &cfg.model, g, label, &state.queue, &cfg.loss)?;
            val_loss += total;
            val_probs.push(out.stas_probability());
        }
        val_loss /= self.val.len() as f64;
        let lr_reduced = state.scheduler.observe(val_loss);
        if state.best.as_ref().is_none_or(|b| val_loss < b.val_loss) {
            state.best = Some(BestSnapshot {
                params: state.params.clone(),
                epoch,
                val_loss,
            });
        }
        let log = EpochLog {
            epoch,
            lr,
            train_loss: sum_total / n,
            train_supcon: sum_sc / n,
            train_mse: sum_mse / n,
            train_ce: sum_ce / n,
            train_accuracy,
            val_loss,
            val_accuracy: accuracy(&val_probs, &self.val.labels, cfg.threshold),
            val_auc: auc_if_defined(&val_probs, &self.val.labels),
            clipped_steps: clipped,
            max_grad_norm: max_norm,
            energy,
            lr_reduced,
        };
        state.log.push(log.clone());
        state.epoch += 1;
        Ok(log)
    }

    /// Continues `state` up to `until` completed epochs, calling `on_epoch` after each.
    pub fn run(
        &self,
        state: &mut TrainState,
        until: usize,
        on_epoch: &mut dyn FnMut(&TrainState, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        while state.epoch < until.min(self.config.epochs) {
            let log = self.run_epoch(state)?;
            on_epoch(state, &log)?;
        }
        Ok(())
    }
}

/// Trains one fold from scratch for `config.epochs` epochs.
pub fn train_fold(train: &[WsiBag], val: &[WsiBag], config: &TrainConfig) -> Result<TrainState> {
    let tr = Split::new(train, config.model.knn_k)?;
    let va = Split::new(val, config.model.knn_k)?;
    let trainer = Trainer::new(config, &tr, &va)?;
    let mut state = TrainState::new(config)?;
    trainer.run(&mut state, config.epochs, &mut |_, _| Ok(()))?;
    Ok(state)
}
