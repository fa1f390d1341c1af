//! Framework training: GTN fine-tuning and cross-conditional GPT training
//! on `α·L_gtn + β·L_gpt`, with the GTN frozen after `freeze_epoch`.
//!
//! The VQ-VAE is frozen throughout; ground-truth codes are encoded once per
//! clip. With teacher forcing on, the genre embedding fed to the GPT is the
//! token bank weighted by the one-hot label and detached, so only the genre
//! loss reaches the GTN.

use std::collections::HashMap;

use gtnb_nn::{adam_step, AdamConfig, Graph, OptimizerState, ParameterStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audio::{MusicFeatureClip, N_MELS};
use crate::checkpoint::{ModelCheckpoint, RngState, STAGE_FRAMEWORK, STAGE_GTN, STAGE_VQVAE};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::genre::GenreLabel;
use crate::gpt::{self, gpt_loss_graph, next_code_accuracy, set_feature_stats, standardized_inputs, CrossCondGpt};
use crate::gtn::{self, GenreTokenNetwork};
use crate::pose::PoseSequence;
use crate::vq::{self, pose_to_codes, PoseCodeSequence, DOWNSAMPLE};

/// One aligned training clip.
#[derive(Clone, Debug)]
pub struct FrameworkClip {
    pub clip_id: String,
    pub features: MusicFeatureClip,
    pub pose: PoseSequence,
    pub label: Option<GenreLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub stage: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub loss_gtn: f64,
    pub loss_gpt: f64,
    pub loss: f64,
    pub gtn_frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameworkEpochLog {
    pub stage: &'static str,
    pub epoch: usize,
    pub loss_gtn: f64,
    pub loss_gpt: f64,
    pub loss: f64,
    /// Teacher-forced next-code accuracy, both heads pooled.
    pub accuracy: f64,
    pub gtn_frozen: bool,
    pub skipped: usize,
    pub wall_s: f64,
}

/// Receives progress during [`train_framework`].
pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) {}
    /// Called after each epoch with the parameters as they stand.
    fn on_epoch(&mut self, _log: &FrameworkEpochLog, _params: &ParameterStore<f32>) {}
}

impl TrainObserver for () {}

#[derive(Clone, Debug, Default)]
pub struct FrameworkRun {
    /// Continue from a framework checkpoint written by an earlier run with
    /// the same effective config.
    pub resume: Option<ModelCheckpoint>,
    /// Stop after this epoch instead of `framework.epochs`.
    pub stop_after: Option<usize>,
}

/// The framework config with its `gtn` and `vqvae` sections taken from the
/// checkpoints that produced those weights.
pub fn framework_config(cfg: &Config, gtn_ckpt: &ModelCheckpoint, vq_ckpt: &ModelCheckpoint) -> Result<Config> {
    let mut eff = cfg.clone();
    eff.gtn = gtn_ckpt.config.gtn.clone();
    eff.vqvae = vq_ckpt.config.vqvae.clone();
    eff.validate()?;
    let steps = eff.framework.crop_frames / DOWNSAMPLE;
    if steps > eff.gpt.context {
        return Err(Error::Config(format!(
            "framework.crop_frames gives {steps} code steps, more than gpt.context ({})",
            eff.gpt.context
        )));
    }
    Ok(eff)
}

struct Prepared {
    mel: Tensor<f32>,
    music: Tensor<f32>,
    energy: Tensor<f32>,
    codes: PoseCodeSequence,
    label: Option<GenreLabel>,
}

fn rows(t: &Tensor<f32>, start: usize, len: usize) -> Tensor<f32> {
    let c = t.cols();
    Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec()).expect("row slice")
}

fn prepare(store: &ParameterStore<f32>, cfg: &Config, clip: &FrameworkClip) -> Result<Prepared> {
    let frames = clip.features.frames().min(clip.pose.frames()) / DOWNSAMPLE * DOWNSAMPLE;
    let pose = clip.pose.crop(0, frames)?;
    let feats = clip.features.crop(0, frames)?;
    let (music, energy) = standardized_inputs(store, &feats)?;
    Ok(Prepared { mel: feats.mel, music, energy, codes: pose_to_codes(store, &cfg.vqvae, &pose)?, label: clip.label })
}

/// Cached GTN output for a frozen network: `(weights, embedding)`.
type GtnCache = HashMap<(usize, usize), (Vec<f64>, Vec<f64>)>;

fn initial_store(
    cfg: &Config,
    gtn_ckpt: &ModelCheckpoint,
    vq_ckpt: &ModelCheckpoint,
    data: &[&FrameworkClip],
) -> Result<ParameterStore<f32>> {
    let mut store = gtn_ckpt.params.subset(gtn::PREFIX);
    store.merge(vq_ckpt.params.subset(vq::PREFIX))?;
    store.freeze(vq::PREFIX);
    let codebook = cfg.vqvae.codebook_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6770_7400);
    CrossCondGpt::new(&cfg.gpt, codebook).init(&mut store, &mut rng)?;
    let feats: Vec<&MusicFeatureClip> = data.iter().map(|c| &c.features).collect();
    set_feature_stats(&mut store, &feats)?;
    Ok(store)
}

/// Trains the full framework and returns a checkpoint holding GTN, VQ-VAE
/// and GPT parameters together.
pub fn train_framework(
    data: &[FrameworkClip],
    gtn_ckpt: &ModelCheckpoint,
    vq_ckpt: &ModelCheckpoint,
    cfg: &Config,
    run: FrameworkRun,
    observer: &mut dyn TrainObserver,
) -> Result<ModelCheckpoint> {
    if gtn_ckpt.stage != STAGE_GTN {
        return Err(Error::StageMismatch { expected: STAGE_GTN.into(), found: gtn_ckpt.stage.clone() });
    }
    if vq_ckpt.stage != STAGE_VQVAE {
        return Err(Error::StageMismatch { expected: STAGE_VQVAE.into(), found: vq_ckpt.stage.clone() });
    }
    let cfg = framework_config(cfg, gtn_ckpt, vq_ckpt)?;
    let fc = &cfg.framework;
    let crop = fc.crop_frames;
    let usable: Vec<&FrameworkClip> =
        data.iter().filter(|c| c.features.frames().min(c.pose.frames()) >= crop).collect();
    let skipped = data.len() - usable.len();
    if skipped > 0 {
        log::warn!("skipping {skipped} clips shorter than {crop} frames");
    }
    if usable.is_empty() {
        return Err(Error::EmptyInput("no clips long enough for framework training".into()));
    }
    if fc.teacher_forcing {
        if let Some(c) = usable.iter().find(|c| c.label.is_none()) {
            return Err(Error::Invalid(format!("clip {} has no genre label; teacher forcing needs one", c.clip_id)));
        }
    }

    let (mut store, mut rng, mut opt, first_epoch) = match run.resume {
        Some(ckpt) => {
            let ckpt = ckpt.require_stage(STAGE_FRAMEWORK)?;
            if ckpt.config_hash != cfg.hash() {
                return Err(Error::Config("resume checkpoint was trained with a different config".into()));
            }
            let rng = ckpt.rng.as_ref().ok_or_else(|| Error::Invalid("resume checkpoint has no RNG state".into()))?;
            let opt = ckpt.optimizer.clone().ok_or_else(|| Error::Invalid("resume checkpoint has no optimizer state".into()))?;
            (ckpt.params.clone(), rng.restore()?, opt, ckpt.epoch + 1)
        }
        None => (
            initial_store(&cfg, gtn_ckpt, vq_ckpt, &usable)?,
            ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6677_6b00),
            OptimizerState::new(AdamConfig { lr: fc.lr, ..AdamConfig::default() }),
            1,
        ),
    };
    let last_epoch = run.stop_after.unwrap_or(fc.epochs).min(fc.epochs);

    let prepared: Vec<Prepared> = usable.iter().map(|c| prepare(&store, &cfg, c)).collect::<Result<_>>()?;
    let codebook = cfg.vqvae.codebook_size;
    let gtn_net = GenreTokenNetwork::new(&cfg.gtn);
    let gpt_net = CrossCondGpt::new(&cfg.gpt, codebook);
    let mut cache = GtnCache::new();
    let mut epoch_done = first_epoch - 1;

    for epoch in first_epoch..=last_epoch {
        let frozen = epoch > fc.freeze_epoch;
        if frozen {
            store.freeze(gtn::PREFIX);
        }
        let start_time = std::time::Instant::now();
        // Fresh permutation each epoch so a resumed run needs only the RNG.
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);
        let (mut sum_gtn, mut sum_gpt, mut sum_total, mut sum_acc) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (step, batch) in order.chunks(fc.batch_size).enumerate() {
            let mut g = Graph::with_store(&store);
            let mut gtn_logits = Vec::new();
            let mut gtn_targets = Vec::new();
            let mut cached_weights = Vec::new();
            let mut cached_labels = Vec::new();
            let mut gpt_terms = Vec::new();
            let mut acc = 0.0;
            for &i in batch {
                let p = &prepared[i];
                let frames = p.mel.rows();
                let start = rng.gen_range(0..=(frames - crop) / DOWNSAMPLE) * DOWNSAMPLE;
                let mel = rows(&p.mel, start, crop);
                let genre_emb: Var = if frozen {
                    let (w, e) = match cache.get(&(i, start)) {
                        Some(hit) => hit.clone(),
                        None => {
                            let inf = gtn::gtn_forward(&store, &cfg.gtn, &mel)?;
                            let v = (inf.weights, inf.embedding);
                            cache.insert((i, start), v.clone());
                            v
                        }
                    };
                    if let Some(l) = p.label {
                        cached_weights.push(w);
                        cached_labels.push(l);
                    }
                    if fc.teacher_forcing {
                        let z = gtn_net.embed_weights(&mut g, &p.label.expect("checked above").one_hot())?;
                        g.detach(z)
                    } else {
                        g.constant(Tensor::new(vec![1, e.len()], e.iter().map(|v| *v as f32).collect())?)
                    }
                } else {
                    let x = g.constant(mel);
                    let out = gtn_net.forward(&mut g, x)?;
                    if let Some(l) = p.label {
                        gtn_logits.push(out.logits);
                        gtn_targets.push(l.id());
                    }
                    if fc.teacher_forcing {
                        let z = gtn_net.embed_weights(&mut g, &p.label.expect("checked above").one_hot())?;
                        g.detach(z)
                    } else {
                        out.embedding
                    }
                };
                let steps = crop / DOWNSAMPLE;
                let c0 = start / DOWNSAMPLE;
                let codes = PoseCodeSequence {
                    upper: p.codes.upper[c0..c0 + steps].to_vec(),
                    lower: p.codes.lower[c0..c0 + steps].to_vec(),
                    downsample_rate: DOWNSAMPLE,
                };
                let music = g.constant(rows(&p.music, start, crop));
                let energy = g.constant(rows(&p.energy, start, crop));
                let (e, m) = gpt_net.condition(&mut g, music, energy, genre_emb)?;
                let (lu, ll) = gpt_net.forward(&mut g, e, m, &codes.upper, &codes.lower)?;
                acc += next_code_accuracy(g.value(lu), g.value(ll), &codes)?;
                gpt_terms.push(gpt_loss_graph(&mut g, lu, ll, &codes)?);
            }
            let n = batch.len() as f32;
            let mut l_gpt = gpt_terms[0];
            for t in &gpt_terms[1..] {
                l_gpt = g.add(l_gpt, *t)?;
            }
            let l_gpt = g.scale(l_gpt, 1.0 / n);
            let loss_gpt = g.value(l_gpt).data()[0] as f64;
            let mut objective = g.scale(l_gpt, fc.beta as f32);
            let loss_gtn = if !gtn_logits.is_empty() {
                let all = g.concat_rows(&gtn_logits)?;
                let l = g.cross_entropy_logits(all, &gtn_targets)?;
                let v = g.value(l).data()[0] as f64;
                let weighted = g.scale(l, fc.alpha as f32);
                objective = g.add(objective, weighted)?;
                v
            } else if !cached_labels.is_empty() {
                let inf: Vec<gtn::GenreInference> =
                    cached_weights.into_iter().map(|w| gtn::GenreInference { weights: w, embedding: vec![] }).collect();
                gtn::gtn_loss(&cached_labels, &inf)?
            } else {
                0.0
            };
            let grads = g.backward(objective)?.param_grads();
            drop(g);
            adam_step(&mut store, &grads, &mut opt)?;
            let total = gpt::combined_loss(loss_gtn, loss_gpt, fc.alpha, fc.beta);
            observer.on_step(&StepLog {
                stage: STAGE_FRAMEWORK,
                epoch,
                step,
                loss_gtn,
                loss_gpt,
                loss: total,
                gtn_frozen: frozen,
            });
            sum_gtn += loss_gtn;
            sum_gpt += loss_gpt;
            sum_total += total;
            sum_acc += acc / batch.len() as f64;
            batches += 1;
        }
        let b = batches as f64;
        observer.on_epoch(
            &FrameworkEpochLog {
                stage: STAGE_FRAMEWORK,
                epoch,
                loss_gtn: sum_gtn / b,
                loss_gpt: sum_gpt / b,
                loss: sum_total / b,
                accuracy: sum_acc / b,
                gtn_frozen: frozen,
                skipped,
                wall_s: start_time.elapsed().as_secs_f64(),
            },
            &store,
        );
        epoch_done = epoch;
    }
    if epoch_done >= fc.freeze_epoch {
        store.freeze(gtn::PREFIX);
    }
    let mut ckpt = ModelCheckpoint::new(store, STAGE_FRAMEWORK, epoch_done, &cfg);
    ckpt.rng = Some(RngState::capture(&rng));
    ckpt.optimizer = Some(opt);
    Ok(ckpt)
}

/// Teacher-forced next-code accuracy of a framework checkpoint over whole
/// clips (cropped to a multiple of 8 and to the GPT context).
pub fn teacher_forced_accuracy(ckpt: &ModelCheckpoint, data: &[FrameworkClip]) -> Result<f64> {
    let cfg = &ckpt.config;
    let codebook = cfg.vqvae.codebook_size;
    let net_g = GenreTokenNetwork::new(&cfg.gtn);
    let net = CrossCondGpt::new(&cfg.gpt, codebook);
    let mut total = 0.0;
    for clip in data {
        let p = prepare(&ckpt.params, cfg, clip)?;
        let steps = p.codes.len().min(cfg.gpt.context);
        let frames = steps * DOWNSAMPLE;
        let mut g = Graph::with_store(&ckpt.params);
        let z = match (cfg.framework.teacher_forcing, p.label) {
            (true, Some(l)) => net_g.embed_weights(&mut g, &l.one_hot())?,
            _ => {
                let mel = g.constant(rows(&p.mel, 0, frames));
                net_g.forward(&mut g, mel)?.embedding
            }
        };
        let music = g.constant(rows(&p.music, 0, frames));
        let energy = g.constant(rows(&p.energy, 0, frames));
        let codes = PoseCodeSequence {
            upper: p.codes.upper[..steps].to_vec(),
            lower: p.codes.lower[..steps].to_vec(),
            downsample_rate: DOWNSAMPLE,
        };
        let (e, m) = net.condition(&mut g, music, energy, z)?;
        let (lu, ll) = net.forward(&mut g, e, m, &codes.upper, &codes.lower)?;
        total += next_code_accuracy(g.value(lu), g.value(ll), &codes)?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// The genre embedding the GPT sees for `clip` during training: label-based
/// with teacher forcing, inferred otherwise.
pub fn training_genre_embedding(
    params: &ParameterStore<f32>,
    cfg: &Config,
    mel: &Tensor<f32>,
    label: Option<GenreLabel>,
) -> Result<Vec<f64>> {
    let net = GenreTokenNetwork::new(&cfg.gtn);
    let mut g = Graph::with_store(params);
    let z = if cfg.framework.teacher_forcing {
        let l = label.ok_or_else(|| Error::Invalid("teacher forcing needs a genre label".into()))?;
        let z = net.embed_weights(&mut g, &l.one_hot())?;
        g.detach(z)
    } else {
        if mel.cols() != N_MELS {
            return Err(Error::Shape(format!("mel must have {N_MELS} columns")));
        }
        let x = g.constant(mel.clone());
        net.forward(&mut g, x)?.embedding
    };
    Ok(g.value(z).data().iter().map(|v| *v as f64).collect())
}
