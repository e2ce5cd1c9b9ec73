//! Binary checkpoint: `PSTN` magic, `u32` format version, `u64` header length, a JSON header
//! (configuration, progress, RNG position, tensor index) and the raw little-endian tensor data.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use pstnet_autograd::{DType, ParamStore, Real, Role};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::PstNet;

const MAGIC: &[u8; 4] = b"PSTN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// 128-bit word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng position {}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Section {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    section: Section,
    buffer: bool,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamMeta {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: ExperimentConfig,
    epoch: usize,
    step: usize,
    rng: RngState,
    adam: Option<AdamMeta>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub config: ExperimentConfig,
    /// Completed epochs and optimiser steps.
    pub epoch: usize,
    pub step: usize,
    pub rng: RngState,
    pub store: ParamStore<T>,
    pub optimizer: Option<AdamW<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: &str, section, buffer, a: &ArrayD<T>, data: &mut Vec<u8>| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                section,
                buffer,
                shape: a.shape().to_vec(),
                offset: data.len() as u64,
            });
            for &v in a.iter() {
                v.write_le(data);
            }
        };
        for (_, e) in self.store.iter() {
            push(&e.name, Section::Param, e.role == Role::Buffer, &e.value, &mut data);
        }
        if let Some(opt) = &self.optimizer {
            for (section, moments) in [(Section::AdamM, &opt.m), (Section::AdamV, &opt.v)] {
                for ((_, e), m) in self.store.iter().zip(moments) {
                    if let Some(m) = m {
                        push(&e.name, section, false, m, &mut data);
                    }
                }
            }
        }
        let header = Header {
            dtype: T::DTYPE.name().to_string(),
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            adam: self.optimizer.as_ref().map(|o| AdamMeta {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                t: o.t,
            }),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if DType::from_name(&header.dtype) != Some(T::DTYPE) {
            return Err(Error::Checkpoint(format!(
                "stored as {}, requested {}",
                header.dtype,
                T::DTYPE.name()
            )));
        }
        let data = &bytes[16 + hlen..];
        let read = |t: &TensorEntry| -> Result<ArrayD<T>> {
            let n: usize = t.shape.iter().product();
            let start = t.offset as usize;
            let chunk = data.get(start..start + n * T::BYTES).ok_or_else(|| bad("truncated tensor data"))?;
            let values: Vec<T> = chunk.chunks_exact(T::BYTES).map(T::read_le).collect();
            Ok(ArrayD::from_shape_vec(IxDyn(&t.shape), values).expect("shape matches length"))
        };
        let mut store = ParamStore::new();
        for t in header.tensors.iter().filter(|t| t.section == Section::Param) {
            let role = if t.buffer { Role::Buffer } else { Role::Trainable };
            store.insert(&t.name, read(t)?, role);
        }
        let optimizer = match &header.adam {
            None => None,
            Some(meta) => {
                let mut opt = AdamW::new(store.len(), meta.weight_decay);
                opt.beta1 = meta.beta1;
                opt.beta2 = meta.beta2;
                opt.eps = meta.eps;
                opt.t = meta.t;
                for t in header.tensors.iter().filter(|t| t.section != Section::Param) {
                    let id = store
                        .id(&t.name)
                        .ok_or_else(|| Error::Checkpoint(format!("moment for unknown parameter {}", t.name)))?;
                    let slot = if t.section == Section::AdamM { &mut opt.m } else { &mut opt.v };
                    slot[id.0] = Some(read(t)?);
                }
                Some(opt)
            }
        };
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng,
            store,
            optimizer,
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

    /// Rebuilds the network described by the stored configuration and checks that the stored
    /// parameters match it name by name.
    pub fn model(&self) -> Result<PstNet> {
        let (net, template) = PstNet::build::<T>(&self.config.model, self.config.train.ablation, 0)?;
        if template.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored tensors, model has {}",
                self.store.len(),
                template.len()
            )));
        }
        for ((_, a), (_, b)) in template.iter().zip(self.store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.role != b.role {
                return Err(Error::Checkpoint(format!(
                    "stored tensor {} {:?} does not match model tensor {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(net)
    }
}
