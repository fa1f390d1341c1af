//! Music-to-dance generation from a framework checkpoint.
//!
//! The genre is inferred once from the whole clip's mel (or injected by the
//! caller). Codes are decoded step by step: each step reruns the masked
//! forward over the grown streams and takes the last row's prediction. Past
//! the GPT context the window slides, keeping the most recent steps.

use std::path::Path;

use gtnb_nn::{Graph, ParameterStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audio::MusicFeatureClip;
use crate::checkpoint::{ModelCheckpoint, STAGE_FRAMEWORK};
use crate::config::Config;
use crate::error::{io_at, Error, Result};
use crate::genre::{GenreLabel, N_GENRES};
use crate::gpt::{argmax_f32, standardized_inputs, CrossCondGpt};
use crate::gtn::{gtn_forward, GenreInference, GenreTokenNetwork};
use crate::pose::PoseSequence;
use crate::vq::{pose_to_codes, vq_decode, PoseCodeSequence, DOWNSAMPLE};

/// Overrides the inferred genre.
#[derive(Clone, Debug, PartialEq)]
pub enum GenreInjection {
    /// One-hot token weights for this genre.
    Label(GenreLabel),
    /// Arbitrary token weights (one per genre).
    Weights(Vec<f64>),
    /// A raw `d_model` embedding.
    Embedding(Vec<f64>),
}

#[derive(Clone, Debug, Default)]
pub struct GenerateOptions {
    pub genre: Option<GenreInjection>,
}

#[derive(Clone, Debug)]
pub struct GeneratedDance {
    pub pose: PoseSequence,
    pub codes: PoseCodeSequence,
    /// What the GTN inferred from the music, whether or not it was used.
    pub inferred: GenreInference,
    /// The embedding actually added to the condition.
    pub embedding: Vec<f64>,
}

/// Seed codes `(u₀, l₀)` from the first 8 frames of a pose.
pub fn seed_codes(ckpt: &ModelCheckpoint, pose: &PoseSequence) -> Result<(usize, usize)> {
    if pose.frames() < DOWNSAMPLE {
        return Err(Error::Invalid(format!("seed pose needs at least {DOWNSAMPLE} frames, got {}", pose.frames())));
    }
    let c = pose_to_codes(&ckpt.params, &ckpt.config.vqvae, &pose.crop(0, DOWNSAMPLE)?)?;
    Ok((c.upper[0], c.lower[0]))
}

fn injected_embedding(params: &ParameterStore<f32>, cfg: &Config, inj: &GenreInjection) -> Result<Vec<f64>> {
    let weights = match inj {
        GenreInjection::Embedding(e) => {
            if e.len() != cfg.gpt.d_model {
                return Err(Error::Shape(format!("injected embedding has {} values, d_model is {}", e.len(), cfg.gpt.d_model)));
            }
            return Ok(e.clone());
        }
        GenreInjection::Label(l) => l.one_hot().to_vec(),
        GenreInjection::Weights(w) => {
            if w.len() != N_GENRES {
                return Err(Error::Shape(format!("{} genre weights, expected {N_GENRES}", w.len())));
            }
            w.clone()
        }
    };
    let net = GenreTokenNetwork::new(&cfg.gtn);
    let mut g = Graph::with_store(params);
    let z = net.embed_weights(&mut g, &weights)?;
    Ok(g.value(z).data().iter().map(|v| *v as f64).collect())
}

fn sample_row(row: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature <= 0.0 {
        return argmax_f32(row);
    }
    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let w: Vec<f64> = row.iter().map(|v| ((*v as f64 - mx) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, x) in w.iter().enumerate() {
        u -= x;
        if u <= 0.0 {
            return i;
        }
    }
    w.len() - 1
}

pub fn generate_dance(
    music: &MusicFeatureClip,
    seed: (usize, usize),
    ckpt: &ModelCheckpoint,
    opts: &GenerateOptions,
) -> Result<GeneratedDance> {
    if ckpt.stage != STAGE_FRAMEWORK {
        return Err(Error::StageMismatch { expected: STAGE_FRAMEWORK.into(), found: ckpt.stage.clone() });
    }
    let cfg = &ckpt.config;
    let params = &ckpt.params;
    let k = cfg.vqvae.codebook_size;
    if seed.0 >= k || seed.1 >= k {
        return Err(Error::Invalid(format!("seed codes {seed:?} out of range [0, {k})")));
    }
    let frames = music.frames();
    if frames == 0 || frames % DOWNSAMPLE != 0 {
        return Err(Error::Invalid(format!("{frames} music frames is not a positive multiple of {DOWNSAMPLE}")));
    }
    let steps = frames / DOWNSAMPLE;
    let inferred = gtn_forward(params, &cfg.gtn, &music.mel)?;
    let embedding = match &opts.genre {
        Some(inj) => injected_embedding(params, cfg, inj)?,
        None => inferred.embedding.clone(),
    };

    // Condition for the whole clip, computed once.
    let net = CrossCondGpt::new(&cfg.gpt, k);
    let (mus, ene) = standardized_inputs(params, music)?;
    let (e_all, m_all) = {
        let mut g = Graph::with_store(params);
        let mv = g.constant(mus);
        let ev = g.constant(ene);
        let z = g.constant(Tensor::new(vec![1, embedding.len()], embedding.iter().map(|v| *v as f32).collect())?);
        let (e, m) = net.condition(&mut g, mv, ev, z)?;
        (g.value(e).clone(), g.value(m).clone())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6765_6e00);
    let mut upper = vec![seed.0];
    let mut lower = vec![seed.1];
    let ctx = cfg.gpt.context;
    while upper.len() < steps {
        let len = upper.len();
        let lo = len.saturating_sub(ctx);
        let w = len - lo;
        let mut g = Graph::with_store(params);
        let e = g.constant(slice_rows(&e_all, lo, w));
        let m = g.constant(slice_rows(&m_all, lo, w));
        let (lu, ll) = net.forward(&mut g, e, m, &upper[lo..], &lower[lo..])?;
        let (vu, vl) = (g.value(lu), g.value(ll));
        let nu = sample_row(vu.row(w - 1), cfg.gpt.temperature, &mut rng);
        let nl = sample_row(vl.row(w - 1), cfg.gpt.temperature, &mut rng);
        upper.push(nu);
        lower.push(nl);
    }
    let codes = PoseCodeSequence { upper, lower, downsample_rate: DOWNSAMPLE };
    let pose = vq_decode(params, &cfg.vqvae, &codes)?;
    Ok(GeneratedDance { pose, codes, inferred, embedding })
}

fn slice_rows(t: &Tensor<f32>, start: usize, len: usize) -> Tensor<f32> {
    let c = t.cols();
    Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec()).expect("row slice")
}

#[derive(Serialize)]
struct Sidecar<'a> {
    frames: usize,
    inferred_genre: &'a str,
    genre_weights: &'a [f64],
    injected_genre: Option<String>,
    seed_codes: [usize; 2],
    seed_source: &'a str,
    music: Option<String>,
    codes_upper: &'a [usize],
    codes_lower: &'a [usize],
    config_hash: &'a str,
}

/// JSON written next to a generated pose CSV.
pub fn write_sidecar(
    path: &Path,
    dance: &GeneratedDance,
    ckpt: &ModelCheckpoint,
    opts: &GenerateOptions,
    seed_source: &str,
    music: Option<&Path>,
) -> Result<()> {
    let injected = opts.genre.as_ref().map(|g| match g {
        GenreInjection::Label(l) => l.code().to_string(),
        GenreInjection::Weights(_) => "weights".to_string(),
        GenreInjection::Embedding(_) => "embedding".to_string(),
    });
    let s = Sidecar {
        frames: dance.pose.frames(),
        inferred_genre: dance.inferred.argmax().code(),
        genre_weights: &dance.inferred.weights,
        injected_genre: injected,
        seed_codes: [dance.codes.upper[0], dance.codes.lower[0]],
        seed_source,
        music: music.map(|m| m.display().to_string()),
        codes_upper: &dance.codes.upper,
        codes_lower: &dance.codes.lower,
        config_hash: &ckpt.config_hash,
    };
    let text = serde_json::to_string_pretty(&s).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_at(path))
}
