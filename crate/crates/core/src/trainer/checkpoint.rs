//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DAEMCKPT"
//! version    u32
//! meta_len   u64, then meta_len bytes of UTF-8 JSON
//! n_tensors  u32, then per tensor:
//!            name_len u32, name bytes, ndim u32, dims u64 × ndim, payload f64 × prod(dims)
//! crc32      u32 over every preceding byte
//! ```
//!
//! Floating-point state (parameters, moments, learning rate, best losses, queue embeddings)
//! lives in the tensor section so it round-trips bit-exactly; the JSON header carries the
//! configuration, counters, RNG position and the epoch log.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::fold::{BestSnapshot, EpochLog, TrainConfig, TrainState};
use super::optim::{AdamW, Plateau};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::model::{ContrastiveQueue, ModelParams};
use crate::numerics::{ParamSet, SeededRng, RNG_ALGORITHM};

pub const MAGIC: &[u8; 8] = b"DAEMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    config_hash: String,
    epoch: usize,
    optimizer_step: u64,
    scheduler_bad_epochs: usize,
    best_epoch: Option<usize>,
    rng_algorithm: String,
    rng_seed: u64,
    /// u128 does not survive JSON numbers, so it travels as a decimal string.
    rng_word_pos: String,
    queue_labels: Vec<Label>,
    log: Vec<EpochLog>,
}

/// Hex SHA-256 of the configuration's JSON encoding.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn collect(prefix: &str, p: &ModelParams, list: &mut Vec<(String, Vec<usize>, Vec<f64>)>) {
    p.visit(&mut |n, t| list.push((format!("{prefix}/{n}"), t.shape().to_vec(), t.data().to_vec())));
}

impl Checkpoint {
    pub fn new(config: TrainConfig, state: TrainState) -> Self {
        Checkpoint { config, state }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let meta = Meta {
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            epoch: s.epoch,
            optimizer_step: s.optimizer.step,
            scheduler_bad_epochs: s.scheduler.bad_epochs,
            best_epoch: s.best.as_ref().map(|b| b.epoch),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            rng_seed: s.rng.seed(),
            rng_word_pos: s.rng.word_pos().to_string(),
            queue_labels: s.queue.entries().map(|(_, l)| *l).collect(),
            log: s.log.clone(),
        };
        let meta = serde_json::to_vec(&meta).expect("meta serializes");

        let mut tensors = Vec::new();
        collect("param", &s.params, &mut tensors);
        collect("adam.m", &s.optimizer.m, &mut tensors);
        collect("adam.v", &s.optimizer.v, &mut tensors);
        if let Some(b) = &s.best {
            collect("best", &b.params, &mut tensors);
        }
        let best_loss = s.best.as_ref().map_or(f64::INFINITY, |b| b.val_loss);
        tensors.push((
            "scalars".into(),
            vec![3],
            vec![s.scheduler.lr, s.scheduler.best, best_loss],
        ));
        if !s.queue.is_empty() {
            let dim = s.queue.entries().next().map_or(0, |(e, _)| e.len());
            let data: Vec<f64> = s.queue.entries().flat_map(|(e, _)| e.iter().copied()).collect();
            tensors.push(("queue".into(), vec![s.queue.len(), dim], data));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in &tensors {
            push_tensor(&mut out, name, shape, data);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 8 + 4 + 4 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if meta.config_hash != config_hash(&meta.config) {
            return Err(bad("config hash does not match stored config"));
        }
        if meta.rng_algorithm != RNG_ALGORITHM {
            return Err(Error::Checkpoint(format!("unknown RNG {}", meta.rng_algorithm)));
        }
        let n = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(name, RawTensor { shape, data });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes before CRC"));
        }
        build_state(meta, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn fill(prefix: &str, template: &ModelParams, tensors: &mut BTreeMap<String, RawTensor>) -> Result<ModelParams> {
    let mut p = template.clone();
    let mut err = None;
    p.visit_mut(&mut |n, t| {
        if err.is_some() {
            return;
        }
        let key = format!("{prefix}/{n}");
        match tensors.remove(&key) {
            Some(raw) if raw.shape == t.shape() => t.data_mut().copy_from_slice(&raw.data),
            Some(raw) => {
                err = Some(Error::Checkpoint(format!(
                    "{key}: shape {:?}, expected {:?}",
                    raw.shape,
                    t.shape()
                )))
            }
            None => err = Some(Error::Checkpoint(format!("missing tensor {key}"))),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(p),
    }
}

fn build_state(meta: Meta, mut tensors: BTreeMap<String, RawTensor>) -> Result<Checkpoint> {
    let cfg = meta.config;
    let template = ModelParams::init(&cfg.model, 0)?;
    let params = fill("param", &template, &mut tensors)?;
    let m = fill("adam.m", &template, &mut tensors)?;
    let v = fill("adam.v", &template, &mut tensors)?;
    let scalars = tensors
        .remove("scalars")
        .filter(|t| t.data.len() == 3)
        .ok_or_else(|| Error::Checkpoint("missing scalars".into()))?;
    let best = match meta.best_epoch {
        Some(epoch) => Some(BestSnapshot {
            params: fill("best", &template, &mut tensors)?,
            epoch,
            val_loss: scalars.data[2],
        }),
        None => None,
    };
    let mut queue = ContrastiveQueue::new(cfg.loss.queue_capacity);
    if let Some(q) = tensors.remove("queue") {
        if q.shape.len() != 2 || q.shape[0] != meta.queue_labels.len() {
            return Err(Error::Checkpoint("queue shape disagrees with labels".into()));
        }
        for (row, label) in q.data.chunks(q.shape[1].max(1)).zip(&meta.queue_labels) {
            queue.push(row.to_vec(), *label);
        }
    } else if !meta.queue_labels.is_empty() {
        return Err(Error::Checkpoint("queue labels without embeddings".into()));
    }
    let word_pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Checkpoint("bad RNG position".into()))?;
    let mut scheduler = Plateau::new(
        scalars.data[0],
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.plateau_threshold,
    );
    scheduler.best = scalars.data[1];
    scheduler.bad_epochs = meta.scheduler_bad_epochs;
    let mut optimizer = AdamW::new(&template, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    optimizer.m = m;
    optimizer.v = v;
    optimizer.step = meta.optimizer_step;
    if !tensors.is_empty() {
        let names: Vec<&String> = tensors.keys().collect();
        return Err(Error::Checkpoint(format!("unexpected tensors {names:?}")));
    }
    let state = TrainState {
        epoch: meta.epoch,
        params,
        optimizer,
        scheduler,
        queue,
        rng: SeededRng::restore(meta.rng_seed, word_pos),
        best,
        log: meta.log,
    };
    Ok(Checkpoint { config: cfg, state })
}
