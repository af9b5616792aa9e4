//! Resumable training state.
//!
//! Layout (little-endian): `"OVTS" | version u16 | header_len u32 | TOML header |
//! tensor_count u32 | (name_len u16 | name | ndim u8 | dims u32… | f64…)*`.
//! Values are stored as f64 so both scalar types round-trip exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, OptimConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::numerics::{ParamSet, Scalar, Tensor};

pub const STATE_MAGIC: &[u8; 4] = b"OVTS";
pub const STATE_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub weights: ModelWeights<T>,
    pub optim: AdamW<T>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub stage_index: usize,
    /// Pairs consumed within the current stage.
    pub stage_samples: usize,
    pub samples_seen: u64,
    pub epoch: u64,
    /// Position inside the current epoch's permutation.
    pub cursor: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    stage_index: usize,
    stage_samples: usize,
    samples_seen: u64,
    epoch: u64,
    cursor: usize,
    seed: u64,
    optim_t: u64,
    optim: OptimConfig,
    model: ModelConfig,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(weights: ModelWeights<T>, optim: OptimConfig, seed: u64) -> Self {
        TrainState {
            weights,
            optim: AdamW::new(optim),
            step: 0,
            stage_index: 0,
            stage_samples: 0,
            samples_seen: 0,
            epoch: 0,
            cursor: 0,
            seed,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            step: self.step,
            stage_index: self.stage_index,
            stage_samples: self.stage_samples,
            samples_seen: self.samples_seen,
            epoch: self.epoch,
            cursor: self.cursor,
            seed: self.seed,
            optim_t: self.optim.t,
            optim: self.optim.config.clone(),
            model: self.weights.config.clone(),
        };
        let header = toml::to_string(&header).map_err(|e| Error::Checkpoint(format!("state header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let groups = [("param/", &self.weights.params), ("m/", &self.optim.m), ("v/", &self.optim.v)];
        let count: usize = groups.iter().map(|(_, p)| p.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (prefix, set) in groups {
            for (name, t) in set.iter() {
                let full = format!("{prefix}{name}");
                out.extend_from_slice(&(full.len() as u16).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.push(t.shape().len() as u8);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(format!("train state: {what}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != STATE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes"));
        if version != STATE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let header = std::str::from_utf8(take(hlen)?).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(header).map_err(|e| bad(&e.to_string()))?;
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        let (mut params, mut m, mut v) = (ParamSet::new(), ParamSet::new(), ParamSet::new());
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(take(nlen)?).map_err(|_| bad("name is not UTF-8"))?.to_owned();
            let ndim = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(numel.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect();
            let t = Tensor::new(shape, data)?;
            let (set, rest) = if let Some(r) = name.strip_prefix("param/") {
                (&mut params, r)
            } else if let Some(r) = name.strip_prefix("m/") {
                (&mut m, r)
            } else if let Some(r) = name.strip_prefix("v/") {
                (&mut v, r)
            } else {
                return Err(bad(&format!("unknown tensor group in {name}")));
            };
            set.insert(rest, t)?;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(TrainState {
            weights: ModelWeights { config: header.model, params },
            optim: AdamW { config: header.optim, m, v, t: header.optim_t },
            step: header.step,
            stage_index: header.stage_index,
            stage_samples: header.stage_samples,
            samples_seen: header.samples_seen,
            epoch: header.epoch,
            cursor: header.cursor,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
