//! Pipeline configuration. TOML text with one table per stage; every key is
//! optional and falls back to the defaults below.
//!
//! ```toml
//! seed = 7
//!
//! [gtn]
//! epochs = 250
//!
//! [framework]
//! freeze_epoch = 90
//! beta = 0.001
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_at, Error, Result};

pub const SEED_ENV: &str = "GTNB_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub gtn: GtnConfig,
    pub vqvae: VqConfig,
    pub gpt: GptConfig,
    pub framework: FrameworkConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            gtn: GtnConfig::default(),
            vqvae: VqConfig::default(),
            gpt: GptConfig::default(),
            framework: FrameworkConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtnConfig {
    /// Output channels of the six strided conv layers.
    pub channels: Vec<usize>,
    /// Width of the reference embedding, tokens and genre embedding.
    pub embed_dim: usize,
    /// Use query/key/value projections in the token layer; raw tokens otherwise.
    pub project_tokens: bool,
    /// Multiplier applied to log-mel input before the conv stack.
    pub input_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Training crop length in frames.
    pub crop_frames: usize,
}

impl Default for GtnConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 32, 64, 64, 128, 128],
            embed_dim: 128,
            project_tokens: true,
            input_scale: 0.1,
            epochs: 250,
            batch_size: 4,
            lr: 3e-4,
            crop_frames: 240,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub beta_commit: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub crop_frames: usize,
    /// Move codebook entries unused during an epoch onto that epoch's
    /// encoder outputs.
    pub restart_dead_codes: bool,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: 512,
            code_dim: 128,
            hidden: 64,
            beta_commit: 0.25,
            epochs: 500,
            batch_size: 4,
            lr: 3e-4,
            crop_frames: 240,
            restart_dead_codes: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GptConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Longest code stream the positional table covers; longer clips are
    /// generated with a sliding window.
    pub context: usize,
    /// Softmax temperature for sampling; 0 means greedy argmax.
    pub temperature: f64,
}

impl Default for GptConfig {
    fn default() -> Self {
        Self { d_model: 128, heads: 4, blocks: 3, context: 30, temperature: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameworkConfig {
    pub epochs: usize,
    pub freeze_epoch: usize,
    pub teacher_forcing: bool,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub crop_frames: usize,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            freeze_epoch: 90,
            teacher_forcing: true,
            alpha: 1.0,
            beta: 0.001,
            batch_size: 4,
            lr: 3e-4,
            crop_frames: 240,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Beat-align kernel width in frames.
    pub bas_sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { bas_sigma: 3.0 }
    }
}

fn check_stage(name: &str, epochs: usize, batch: usize, lr: f64) -> Result<()> {
    if epochs == 0 {
        return Err(Error::Config(format!("{name}.epochs must be > 0")));
    }
    if batch == 0 {
        return Err(Error::Config(format!("{name}.batch_size must be > 0")));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("{name}.lr must be positive")));
    }
    Ok(())
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `GTNB_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.gtn;
        check_stage("gtn", g.epochs, g.batch_size, g.lr)?;
        if g.channels.is_empty() || g.channels.contains(&0) || g.embed_dim == 0 || g.crop_frames == 0 {
            return Err(Error::Config("gtn widths and crop_frames must be positive".into()));
        }
        let v = &self.vqvae;
        check_stage("vqvae", v.epochs, v.batch_size, v.lr)?;
        if v.codebook_size == 0 || v.code_dim == 0 || v.hidden == 0 || v.beta_commit < 0.0 {
            return Err(Error::Config("vqvae sizes must be positive and beta_commit ≥ 0".into()));
        }
        if v.crop_frames == 0 || v.crop_frames % 8 != 0 {
            return Err(Error::Config("vqvae.crop_frames must be a positive multiple of 8".into()));
        }
        let p = &self.gpt;
        if p.d_model == 0 || p.heads == 0 || p.d_model % p.heads != 0 || p.blocks == 0 || p.context < 2 {
            return Err(Error::Config("gpt.d_model must split across heads; blocks ≥ 1; context ≥ 2".into()));
        }
        if p.temperature < 0.0 {
            return Err(Error::Config("gpt.temperature must be ≥ 0".into()));
        }
        if p.d_model != g.embed_dim {
            return Err(Error::Config(format!(
                "gpt.d_model ({}) must equal gtn.embed_dim ({}) so the genre embedding can be added",
                p.d_model, g.embed_dim
            )));
        }
        let f = &self.framework;
        check_stage("framework", f.epochs, f.batch_size, f.lr)?;
        if f.freeze_epoch > f.epochs {
            return Err(Error::Config("framework.freeze_epoch must be ≤ framework.epochs".into()));
        }
        if !(f.alpha >= 0.0 && f.beta >= 0.0) {
            return Err(Error::Config("framework.alpha and framework.beta must be ≥ 0".into()));
        }
        if f.crop_frames == 0 || f.crop_frames % 8 != 0 {
            return Err(Error::Config("framework.crop_frames must be a positive multiple of 8".into()));
        }
        if self.eval.bas_sigma <= 0.0 {
            return Err(Error::Config("eval.bas_sigma must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_published_schedule() {
        let c = Config::default();
        assert_eq!((c.gtn.epochs, c.vqvae.epochs, c.framework.epochs), (250, 500, 400));
        assert_eq!(c.framework.freeze_epoch, 90);
        assert_eq!((c.framework.alpha, c.framework.beta), (1.0, 0.001));
        assert_eq!((c.vqvae.codebook_size, c.vqvae.code_dim), (512, 128));
        c.validate().unwrap();
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let c = Config::from_toml("seed = 3\n[framework]\nbeta = 0.5\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.framework.beta, 0.5);
        assert_eq!(c.framework.epochs, 400);
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(Config::from_toml("[framework]\nfreeze_epoch = 500\n").is_err());
        assert!(Config::from_toml("[gtn]\nbogus = 1\n").is_err());
        assert!(Config::from_toml("[gpt]\nd_model = 64\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
