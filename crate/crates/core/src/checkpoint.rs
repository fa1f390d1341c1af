//! Checkpoint file format.
//!
//! All integers little-endian.
//!
//! ```text
//! magic      4 bytes  "GTNB"
//! version    u32      1
//! count      u64      number of tensor entries
//! entry × count:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (rank × u64)
//!   values   product(dims) × f32
//! meta_len   u32
//! meta       JSON (UTF-8, meta_len bytes)
//! ```
//!
//! Model parameters use their store names. Optimizer moments are stored as
//! extra entries named `@m:<param>` and `@v:<param>`. The JSON block holds
//! stage tag, epoch, full config, config hash, frozen prefixes, RNG state and
//! optimizer hyperparameters.

use std::path::Path;

use gtnb_nn::{AdamConfig, OptimizerState, ParameterStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{io_at, Error, Result};

pub const MAGIC: &[u8; 4] = b"GTNB";
pub const FORMAT_VERSION: u32 = 1;

pub const STAGE_GTN: &str = "gtn-pretrain";
pub const STAGE_VQVAE: &str = "vqvae";
pub const STAGE_FRAMEWORK: &str = "framework";

const MOMENT1: &str = "@m:";
const MOMENT2: &str = "@v:";

/// Serializable ChaCha8 position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Corrupt(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Corrupt("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Corrupt("rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub params: ParameterStore<f32>,
    pub stage: String,
    /// Last completed epoch.
    pub epoch: usize,
    pub config: Config,
    pub config_hash: String,
    pub rng: Option<RngState>,
    pub optimizer: Option<OptimizerState<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    stage: String,
    epoch: usize,
    config_hash: String,
    config: Config,
    frozen: Vec<String>,
    rng: Option<RngState>,
    optimizer: Option<OptimMeta>,
}

#[derive(Serialize, Deserialize)]
struct OptimMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

impl ModelCheckpoint {
    pub fn new(params: ParameterStore<f32>, stage: &str, epoch: usize, config: &Config) -> Self {
        Self {
            params,
            stage: stage.to_string(),
            epoch,
            config: config.clone(),
            config_hash: config.hash(),
            rng: None,
            optimizer: None,
        }
    }

    pub fn require_stage(self, expected: &str) -> Result<Self> {
        if self.stage != expected {
            return Err(Error::StageMismatch { expected: expected.into(), found: self.stage });
        }
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(k, t)| (k.clone(), t)).collect();
        if let Some(opt) = &self.optimizer {
            for (k, m, v) in opt.moments() {
                entries.push((format!("{MOMENT1}{k}"), m));
                entries.push((format!("{MOMENT2}{k}"), v));
            }
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, t) in &entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let meta = Meta {
            stage: self.stage.clone(),
            epoch: self.epoch,
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            frozen: self.params.frozen_prefixes().cloned().collect(),
            rng: self.rng.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimMeta {
                lr: o.config.lr,
                beta1: o.config.beta1,
                beta2: o.config.beta2,
                eps: o.config.eps,
                step: o.step_count(),
            }),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("missing GTNB magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
        }
        let count = r.u64()?;
        let mut params = ParameterStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Corrupt("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
            let n = n.filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()));
            let n = n.ok_or_else(|| Error::Corrupt(format!("entry `{name}` runs past end of file")))?;
            let data = r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap()))).collect();
            let t = Tensor::new(dims, data)?;
            if let Some(p) = name.strip_prefix(MOMENT1) {
                first.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix(MOMENT2) {
                second.push((p.to_string(), t));
            } else {
                params.insert(name, t).map_err(|e| Error::Corrupt(e.to_string()))?;
            }
        }
        let len = r.u32()? as usize;
        let meta: Meta =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Corrupt(format!("metadata: {e}")))?;
        if r.remaining() != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.remaining())));
        }
        for p in meta.frozen {
            params.freeze(p);
        }
        let optimizer = match meta.optimizer {
            None => None,
            Some(o) => {
                if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.0 != b.0) {
                    return Err(Error::Corrupt("optimizer moments are unpaired".into()));
                }
                let cfg = AdamConfig { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps };
                let moments = first.into_iter().zip(second).map(|((k, m), (_, v))| (k, m, v));
                Some(OptimizerState::restore(cfg, o.step, moments)?)
            }
        };
        Ok(Self {
            params,
            stage: meta.stage,
            epoch: meta.epoch,
            config: meta.config,
            config_hash: meta.config_hash,
            rng: meta.rng,
            optimizer,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(io_at(path))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let buf = std::fs::read(path).map_err(io_at(path))?;
    ModelCheckpoint::from_bytes(&buf)
}

/// Loads and checks the stage tag.
pub fn load_stage(path: &Path, stage: &str) -> Result<ModelCheckpoint> {
    load_checkpoint(path)?.require_stage(stage)
}
