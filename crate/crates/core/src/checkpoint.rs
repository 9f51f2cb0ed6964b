//! Versioned binary checkpoint: a JSON manifest followed by raw tensors.
//!
//! Layout: the 8-byte magic, a little-endian `u32` format version, a `u64`
//! manifest length, the UTF-8 manifest, then every tensor listed in the
//! manifest as little-endian `f64` values in manifest order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::Matrix;
use crate::trainer::{EpochStats, TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"TSDFCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Stored as a string because JSON numbers cannot hold a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position {:?}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

/// Trained parameters of a downstream head, stored under `namespace`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecord {
    pub namespace: String,
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub params: ParamStore,
    pub train_config: Option<TrainConfig>,
    pub epoch: usize,
    pub rng: Option<RngState>,
    pub optimizer: Option<OptimizerState>,
    pub history: Vec<EpochStats>,
    pub normalizer: Option<Normalizer>,
    pub heads: Vec<HeadRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    epoch: usize,
    rng: Option<RngState>,
    optimizer_step: Option<u64>,
    history: Vec<EpochStats>,
    normalizer: Option<Normalizer>,
    heads: Vec<HeadMeta>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    namespace: String,
    meta: serde_json::Value,
}

const MODEL: &str = "model";
const ADAM_M: &str = "adam_m";
const ADAM_V: &str = "adam_v";

fn head_group(ns: &str) -> String {
    format!("head:{ns}")
}

impl Checkpoint {
    /// Parameters only, no training state.
    pub fn from_model(model: &Model) -> Self {
        Self {
            model_config: model.config.clone(),
            params: model.params.clone(),
            train_config: None,
            epoch: 0,
            rng: None,
            optimizer: None,
            history: Vec::new(),
            normalizer: None,
            heads: Vec::new(),
        }
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            train_config: Some(t.config.clone()),
            epoch: t.epoch,
            rng: Some(RngState::capture(&t.rng)),
            optimizer: Some(OptimizerState {
                step: t.optim.step,
                m: t.optim.m.clone(),
                v: t.optim.v.clone(),
            }),
            history: t.history.clone(),
            ..Self::from_model(&t.model)
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.model_config.clone(), &self.params)
    }

    /// Restores the exact training state, optionally under a new config.
    /// A new config restarts the epoch count, the history and the optimiser.
    pub fn trainer(&self, config: Option<TrainConfig>) -> Result<Trainer> {
        let model = self.model()?;
        match (config, &self.train_config) {
            (None, Some(cfg)) => {
                let mut t = Trainer::new(model, cfg.clone())?;
                t.epoch = self.epoch;
                t.history = self.history.clone();
                if let Some(r) = &self.rng {
                    t.rng = r.restore()?;
                }
                if let Some(o) = &self.optimizer {
                    t.optim = restore_optim(&t.model.params, cfg, o)?;
                }
                Ok(t)
            }
            (Some(cfg), _) => Trainer::new(model, cfg),
            (None, None) => Err(Error::Checkpoint("checkpoint holds no training config".into())),
        }
    }

    pub fn head(&self, namespace: &str) -> Option<&HeadRecord> {
        self.heads.iter().find(|h| h.namespace == namespace)
    }

    /// Inserts or replaces a head record.
    pub fn set_head(&mut self, record: HeadRecord) {
        self.heads.retain(|h| h.namespace != record.namespace);
        self.heads.push(record);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut data: Vec<&Matrix> = Vec::new();
        for (_, name, m) in self.params.iter() {
            tensors.push(entry(MODEL, name, m));
            data.push(m);
        }
        if let Some(o) = &self.optimizer {
            for ((_, name, _), m) in self.params.iter().zip(&o.m) {
                tensors.push(entry(ADAM_M, name, m));
                data.push(m);
            }
            for ((_, name, _), v) in self.params.iter().zip(&o.v) {
                tensors.push(entry(ADAM_V, name, v));
                data.push(v);
            }
        }
        for h in &self.heads {
            let group = head_group(&h.namespace);
            for (_, name, m) in h.params.iter() {
                tensors.push(entry(&group, name, m));
                data.push(m);
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            history: self.history.clone(),
            normalizer: self.normalizer.clone(),
            heads: self
                .heads
                .iter()
                .map(|h| HeadMeta {
                    namespace: h.namespace.clone(),
                    meta: h.meta.clone(),
                })
                .collect(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serialises");
        let n: usize = data.iter().map(|m| m.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for m in data {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let mut cursor = 20 + len;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        let mut heads: Vec<HeadRecord> = manifest
            .heads
            .into_iter()
            .map(|h| HeadRecord {
                namespace: h.namespace,
                meta: h.meta,
                params: ParamStore::new(),
            })
            .collect();
        for t in &manifest.tensors {
            let n = t.rows * t.cols;
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| bad("truncated tensor data"))?;
            cursor += 8 * n;
            let vals = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let mat = Matrix::from_vec(t.rows, t.cols, vals)?;
            match t.group.as_str() {
                MODEL => {
                    params.insert(t.name.clone(), mat);
                }
                ADAM_M => m.push(mat),
                ADAM_V => v.push(mat),
                g => {
                    let ns = g
                        .strip_prefix("head:")
                        .ok_or_else(|| Error::Checkpoint(format!("unknown tensor group {g}")))?;
                    let head = heads
                        .iter_mut()
                        .find(|h| h.namespace == ns)
                        .ok_or_else(|| Error::Checkpoint(format!("tensor for unknown head {ns}")))?;
                    head.params.insert(t.name.clone(), mat);
                }
            }
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let optimizer = match manifest.optimizer_step {
            Some(step) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(bad("optimizer moments do not match parameters"));
                }
                Some(OptimizerState { step, m, v })
            }
            None => None,
        };
        Ok(Self {
            model_config: manifest.model_config,
            params,
            train_config: manifest.train_config,
            epoch: manifest.epoch,
            rng: manifest.rng,
            optimizer,
            history: manifest.history,
            normalizer: manifest.normalizer,
            heads,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn entry(group: &str, name: &str, m: &Matrix) -> TensorEntry {
    TensorEntry {
        group: group.to_string(),
        name: name.to_string(),
        rows: m.rows(),
        cols: m.cols(),
    }
}

fn restore_optim(store: &ParamStore, cfg: &TrainConfig, o: &OptimizerState) -> Result<AdamW> {
    let mut opt = AdamW::new(store, cfg.adam());
    for (i, (_, name, p)) in store.iter().enumerate() {
        if o.m[i].shape() != p.shape() || o.v[i].shape() != p.shape() {
            return Err(Error::Checkpoint(format!("moment shape mismatch for {name}")));
        }
    }
    opt.step = o.step;
    opt.m = o.m.clone();
    opt.v = o.v.clone();
    Ok(opt)
}
