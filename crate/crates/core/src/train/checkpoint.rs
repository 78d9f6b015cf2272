//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `MMINRCKP` |
//! | 4 | format version (`u32`) |
//! | 8 | header length `n` (`u64`) |
//! | n | UTF-8 JSON header |
//! | rest | `f32` blobs in header tensor order |
//!
//! The header records the run setup, its hash, the iteration, the RNG state,
//! the best validation PSNR, the optimizer step and one entry per tensor
//! (`name`, `shape`, `kind`): model parameters first, then the Adam first
//! and second moments in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::Setup;
use crate::error::{Error, Result};
use crate::model::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMINRCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Serialized `ChaCha8Rng` position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub setup: Setup,
    pub iteration: u64,
    pub rng: RngState,
    pub best_val_psnr: Option<f64>,
    pub params: ParamStore<f32>,
    pub adam: Adam,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config_hash: String,
    setup: Setup,
    iteration: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    best_val_psnr: Option<f64>,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    kind: TensorKind,
}

#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    AdamM,
    AdamV,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        let mut tensors = Vec::new();
        for kind in [TensorKind::Param, TensorKind::AdamM, TensorKind::AdamV] {
            for id in p.ids() {
                tensors.push(TensorEntry { name: p.name(id).to_string(), shape: p.get(id).shape().to_vec(), kind });
            }
        }
        let header = Header {
            config_hash: self.setup.config_hash(),
            setup: self.setup.clone(),
            iteration: self.iteration,
            rng_seed: hex::encode(self.rng.seed),
            rng_stream: self.rng.stream,
            rng_word_pos: self.rng.word_pos.to_string(),
            best_val_psnr: self.best_val_psnr,
            adam_step: self.adam.step,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 12 * p.count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |d: &[f32]| d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for id in p.ids() {
            put(p.get(id).data());
        }
        for m in &self.adam.m {
            put(m);
        }
        for v in &self.adam.v {
            put(v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}, expected {FORMAT_VERSION}")));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes.get(20..20 + n).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
        let hash = header.setup.config_hash();
        if hash != header.config_hash {
            return Err(Error::ConfigHashMismatch { expected: header.config_hash, found: hash });
        }
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&header.rng_seed, &mut seed).map_err(|e| bad(format!("rng seed: {e}")))?;
        let word_pos = header.rng_word_pos.parse().map_err(|e| bad(format!("rng position: {e}")))?;

        let mut cursor = 20 + n;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for t in &header.tensors {
            let len: usize = t.shape.iter().product();
            let end = cursor + 4 * len;
            let raw = bytes.get(cursor..end).ok_or_else(|| bad(format!("truncated data for {}", t.name)))?;
            cursor = end;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            match t.kind {
                TensorKind::Param => {
                    params.add(t.name.clone(), Tensor::new(t.shape.clone(), data));
                }
                TensorKind::AdamM => m.push(data),
                TensorKind::AdamV => v.push(data),
            }
        }
        if cursor != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - cursor)));
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(bad("optimizer state does not match the parameter list"));
        }
        let adam = Adam { config: header.setup.train.adam, step: header.adam_step, m, v };
        Ok(Checkpoint {
            setup: header.setup,
            iteration: header.iteration,
            rng: RngState { seed, stream: header.rng_stream, word_pos },
            best_val_psnr: header.best_val_psnr,
            params,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}
