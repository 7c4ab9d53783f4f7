//! Binary checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "PCKPT\0\0\0"
//! version u32
//! hlen    u64      length of the JSON header
//! header  hlen bytes of UTF-8 JSON
//! payload f64 values: every tensor in header order, then the optimizer
//!         moments (m, then v) of each parameter flagged in the header
//! ```
//!
//! The header records the SHA-256 of the payload, so truncation and
//! corruption are both detected on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{GptModel, ModelConfig, Trainable, TransformerWeights, Weights};
use crate::plan::CompressionPlan;
use crate::projection::ProjectedModel;
use crate::tensor::Tensor;
use crate::train::{Moments, OptimizerState, TrainConfig, TrainState, Trainer};

pub const MAGIC: &[u8; 8] = b"PCKPT\0\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelKind {
    Model {
        config: ModelConfig,
    },
    Projected {
        plan: CompressionPlan,
        residual: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainEntry {
    pub config: TrainConfig,
    pub step: usize,
    pub optimizer_step: u64,
    /// One flag per tensor: whether its moments follow in the payload.
    pub has_moments: Vec<bool>,
    pub losses: Vec<f64>,
    pub batch_digest: String,
    /// The next batch index the run will read.
    pub data_cursor: u64,
    pub data_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub dtype: String,
    pub model: ModelKind,
    pub tensors: Vec<TensorEntry>,
    pub train: Option<TrainEntry>,
    pub payload_sha256: String,
}

/// A model (and optionally its training state) ready to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub tensors: Vec<(String, Tensor)>,
    pub train: Option<(TrainConfig, TrainState)>,
}

/// A model restored from disk.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Gpt(GptModel),
    Projected(ProjectedModel),
}

fn snapshot<M: Trainable>(model: &M) -> Vec<(String, Tensor)> {
    model
        .params()
        .into_iter()
        .map(|(n, t)| {
            let copy = Tensor::new(t.shape().to_vec(), t.data().to_vec())
                .expect("valid tensor")
                .with_requires_grad(t.requires_grad());
            (n, copy)
        })
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &GptModel) -> Self {
        Self {
            model: ModelKind::Model {
                config: model.config,
            },
            tensors: snapshot(model),
            train: None,
        }
    }

    pub fn from_projected(model: &ProjectedModel) -> Self {
        Self {
            model: ModelKind::Projected {
                plan: model.plan.clone(),
                residual: model.has_residual(),
            },
            tensors: snapshot(model),
            train: None,
        }
    }

    pub fn with_trainer(mut self, trainer: &Trainer) -> Self {
        self.train = Some((trainer.config, trainer.state.clone()));
        self
    }

    /// Serializes to bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        for (_, t) in &self.tensors {
            push_f64s(&mut payload, t.data());
        }
        let train = match &self.train {
            None => None,
            Some((config, state)) => {
                let moments = &state.optimizer.moments;
                if !moments.is_empty() && moments.len() != self.tensors.len() {
                    return Err(Error::Format(
                        "optimizer slots differ from tensor count".into(),
                    ));
                }
                let has_moments: Vec<bool> = (0..self.tensors.len())
                    .map(|i| moments.get(i).is_some_and(Option::is_some))
                    .collect();
                for m in moments.iter().flatten() {
                    push_f64s(&mut payload, &m.m);
                    push_f64s(&mut payload, &m.v);
                }
                Some(TrainEntry {
                    config: *config,
                    step: state.step,
                    optimizer_step: state.optimizer.step,
                    has_moments,
                    losses: state.losses.clone(),
                    batch_digest: hex::encode(state.batch_digest),
                    data_cursor: state.step as u64,
                    data_seed: config.seed,
                })
            }
        };
        let header = Header {
            format_version: VERSION,
            dtype: "f64-le".into(),
            model: self.model.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    trainable: t.requires_grad(),
                })
                .collect(),
            train,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 20 {
            return Err(fmt("file shorter than the fixed preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let body = &bytes[20..];
        if hlen > body.len() as u64 {
            return Err(fmt("truncated header"));
        }
        let (json, payload) = body.split_at(hlen as usize);
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.format_version != VERSION || header.dtype != "f64-le" {
            return Err(fmt("header version or dtype mismatch"));
        }

        let tensor_len: usize = header
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        let moment_len: usize = match &header.train {
            Some(t) => {
                if t.has_moments.len() != header.tensors.len() {
                    return Err(fmt("moment flags differ from tensor count"));
                }
                header
                    .tensors
                    .iter()
                    .zip(&t.has_moments)
                    .filter(|(_, &h)| h)
                    .map(|(e, _)| 2 * e.shape.iter().product::<usize>())
                    .sum()
            }
            None => 0,
        };
        let expected = (tensor_len + moment_len) * 8;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(fmt("payload checksum mismatch"));
        }

        let mut cursor = PayloadReader { bytes: payload };
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.shape.iter().product();
            let t = Tensor::new(e.shape.clone(), cursor.take(n))?.with_requires_grad(e.trainable);
            tensors.push((e.name.clone(), t));
        }
        let train = match header.train {
            None => None,
            Some(t) => {
                let any = t.has_moments.iter().any(|&h| h);
                let moments = if any || t.optimizer_step > 0 {
                    tensors
                        .iter()
                        .zip(&t.has_moments)
                        .map(|((_, tensor), &h)| {
                            h.then(|| Moments {
                                m: cursor.take(tensor.numel()),
                                v: cursor.take(tensor.numel()),
                            })
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                let digest: [u8; 32] = hex::decode(&t.batch_digest)
                    .ok()
                    .and_then(|d| d.try_into().ok())
                    .ok_or_else(|| fmt("bad batch digest"))?;
                let state = TrainState {
                    step: t.step,
                    optimizer: OptimizerState {
                        step: t.optimizer_step,
                        moments,
                    },
                    losses: t.losses,
                    batch_digest: digest,
                };
                Some((t.config, state))
            }
        };
        Ok(Self {
            model: header.model,
            tensors,
            train,
        })
    }

    /// Writes atomically: a temporary file in the same directory is
    /// renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let file_name = path
            .file_name()
            .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
        let tmp = dir.join(format!(
            ".{}.tmp{}",
            file_name.to_string_lossy(),
            std::process::id()
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the stored model, restoring values and freeze flags.
    pub fn model(&self) -> Result<LoadedModel> {
        match &self.model {
            ModelKind::Model { config } => {
                config.validate()?;
                let zeros = Weights::from_fn(config.n_layers, config.tied_embeddings, |n| {
                    Ok(Tensor::zeros(&n.shape(config)))
                })?;
                let mut m = GptModel::new(*config, zeros)?;
                self.restore_into(&mut m)?;
                Ok(LoadedModel::Gpt(m))
            }
            ModelKind::Projected { plan, residual } => {
                plan.validate()?;
                let mut m = ProjectedModel::skeleton(plan, *residual)?;
                self.restore_into(&mut m)?;
                Ok(LoadedModel::Projected(m))
            }
        }
    }

    /// Copies the stored tensors into `model`, which must have the same
    /// parameter names and shapes in the same order.
    pub fn restore_into<M: Trainable>(&self, model: &mut M) -> Result<()> {
        let mut params = model.params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for ((name, dst), (src_name, src)) in params.iter_mut().zip(&self.tensors) {
            if name != src_name || dst.shape() != src.shape() {
                return Err(Error::Format(format!(
                    "tensor {src_name} {:?} does not match model slot {name} {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
            dst.set_requires_grad(src.requires_grad());
        }
        Ok(())
    }

    /// Trainer positioned where the saved run stopped.
    pub fn trainer(&self) -> Result<Option<Trainer>> {
        self.train
            .as_ref()
            .map(|(c, s)| Trainer::resume(*c, s.clone()))
            .transpose()
    }
}

impl LoadedModel {
    pub fn into_gpt(self) -> Result<GptModel> {
        match self {
            LoadedModel::Gpt(m) => Ok(m),
            LoadedModel::Projected(_) => Err(Error::Config(
                "expected a plain model checkpoint, found a projected one".into(),
            )),
        }
    }

    pub fn into_projected(self) -> Result<ProjectedModel> {
        match self {
            LoadedModel::Projected(m) => Ok(m),
            LoadedModel::Gpt(_) => Err(Error::Config(
                "expected a projected checkpoint, found a plain model".into(),
            )),
        }
    }

    pub fn forward_config(&self) -> ModelConfig {
        match self {
            LoadedModel::Gpt(m) => m.config,
            LoadedModel::Projected(m) => m.plan.target_config,
        }
    }

    /// Base weights: the model itself, or the frozen source of a projected
    /// model.
    pub fn weights(&self) -> TransformerWeights {
        match self {
            LoadedModel::Gpt(m) => m.weights.clone(),
            LoadedModel::Projected(m) => m.base_weights(),
        }
    }
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct PayloadReader<'a> {
    bytes: &'a [u8],
}

impl PayloadReader<'_> {
    /// Length was validated against the header before reading.
    fn take(&mut self, n: usize) -> Vec<f64> {
        let (head, rest) = self.bytes.split_at(n * 8);
        self.bytes = rest;
        head.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    }
}
