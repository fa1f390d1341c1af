//! Choreographic memory: one VQ-VAE per half body. Each encoder halves the
//! time axis three times (8 pose frames per code); the decoder mirrors it
//! with transposed convolutions.

use gtnb_nn::layers::{Conv1d, ConvTranspose1d};
use gtnb_nn::{adam_step, AdamConfig, Gradients, Graph, OptimizerState, ParameterStore, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{ModelCheckpoint, RngState, STAGE_VQVAE};
use crate::config::{Config, VqConfig};
use crate::error::{Error, Result};
use crate::pose::{merge_body, split_body, HalfBodySplit, PoseSequence, LOWER_WIDTH, POSE_FPS, UPPER_WIDTH};

pub const PREFIX: &str = "vq";
/// Per-column pose statistics; set from the training clips, never trained.
pub const STATS_PREFIX: &str = "vq.stats";
pub const DOWNSAMPLE: usize = 8;
/// Lower bound on a column's standard deviation (metres), so columns that
/// barely move are not blown up into noise.
pub const STD_FLOOR: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Half {
    Upper,
    Lower,
}

impl Half {
    pub const BOTH: [Half; 2] = [Half::Upper, Half::Lower];

    pub fn width(self) -> usize {
        match self {
            Half::Upper => UPPER_WIDTH,
            Half::Lower => LOWER_WIDTH,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Half::Upper => "vq.upper",
            Half::Lower => "vq.lower",
        }
    }

    fn stats_names(self) -> (&'static str, &'static str) {
        match self {
            Half::Upper => ("vq.stats.upper_mean", "vq.stats.upper_std"),
            Half::Lower => ("vq.stats.lower_mean", "vq.stats.lower_std"),
        }
    }

    fn pick(self, s: &HalfBodySplit) -> &Tensor<f32> {
        match self {
            Half::Upper => &s.upper,
            Half::Lower => &s.lower,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoseCodeSequence {
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
    pub downsample_rate: usize,
}

impl PoseCodeSequence {
    pub fn len(&self) -> usize {
        self.upper.len()
    }

    pub fn is_empty(&self) -> bool {
        self.upper.is_empty()
    }
}

/// Encoder/decoder pair for one half.
#[derive(Clone, Debug)]
pub struct HalfVq {
    pub half: Half,
    pub codebook_size: usize,
    pub code_dim: usize,
    enc: Vec<Conv1d>,
    proj: Conv1d,
    dec: Vec<ConvTranspose1d>,
    out: Conv1d,
}

impl HalfVq {
    pub fn new(half: Half, cfg: &VqConfig) -> Self {
        let n = half.name();
        let (d, h, c) = (half.width(), cfg.hidden, cfg.code_dim);
        Self {
            half,
            codebook_size: cfg.codebook_size,
            code_dim: c,
            enc: vec![
                Conv1d::new(format!("{n}.enc0"), d, h, 4, 2, 1),
                Conv1d::new(format!("{n}.enc1"), h, h, 4, 2, 1),
                Conv1d::new(format!("{n}.enc2"), h, h, 4, 2, 1),
            ],
            proj: Conv1d::new(format!("{n}.proj"), h, c, 3, 1, 1),
            dec: vec![
                ConvTranspose1d::new(format!("{n}.dec0"), c, h, 4, 2, 1),
                ConvTranspose1d::new(format!("{n}.dec1"), h, h, 4, 2, 1),
                ConvTranspose1d::new(format!("{n}.dec2"), h, h, 4, 2, 1),
            ],
            out: Conv1d::new(format!("{n}.out"), h, d, 3, 1, 1),
        }
    }

    pub fn codebook_name(&self) -> String {
        format!("{}.codebook", self.half.name())
    }

    /// Random init; the codebook starts at zero until [`init_codebook`] runs.
    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<F>, rng: &mut R) -> Result<()> {
        for c in &self.enc {
            c.init(store, rng)?;
        }
        self.proj.init(store, rng)?;
        for c in &self.dec {
            c.init(store, rng)?;
        }
        self.out.init(store, rng)?;
        store.insert(self.codebook_name(), Tensor::zeros(&[self.codebook_size, self.code_dim]))?;
        let (m, sd) = self.half.stats_names();
        let w = self.half.width();
        store.insert(m, Tensor::zeros(&[w]))?;
        store.insert(sd, Tensor::filled(&[w], F::one()))?;
        store.freeze(STATS_PREFIX);
        Ok(())
    }

    fn diag<F: Real>(g: &mut Graph<'_, F>, values: impl Iterator<Item = F>, w: usize) -> Result<Var> {
        let mut d = Tensor::zeros(&[w, w]);
        for (i, v) in values.enumerate() {
            d.data_mut()[i * w + i] = v;
        }
        Ok(g.constant(d))
    }

    /// Raw pose columns → standardized.
    pub fn normalize<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (m, sd) = self.half.stats_names();
        let w = self.half.width();
        let mean = g.param(m)?;
        let std = g.param(sd)?;
        let neg = g.scale(mean, -F::one());
        let centred = g.add_row(x, neg)?;
        let inv: Vec<F> = g.value(std).data().iter().map(|v| F::one() / *v).collect();
        let d = Self::diag(g, inv.into_iter(), w)?;
        Ok(g.matmul(centred, d)?)
    }

    /// Inverse of [`HalfVq::normalize`].
    pub fn denormalize<F: Real>(&self, g: &mut Graph<'_, F>, y: Var) -> Result<Var> {
        let (m, sd) = self.half.stats_names();
        let w = self.half.width();
        let mean = g.param(m)?;
        let std = g.param(sd)?;
        let sv: Vec<F> = g.value(std).data().to_vec();
        let d = Self::diag(g, sv.into_iter(), w)?;
        let scaled = g.matmul(y, d)?;
        Ok(g.add_row(scaled, mean)?)
    }

    /// `x: [frames, width]` raw pose → latent `[frames / 8, code_dim]`.
    pub fn encode<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let xn = self.normalize(g, x)?;
        self.encode_normalized(g, xn)
    }

    fn check_input<F: Real>(&self, g: &Graph<'_, F>, x: Var) -> Result<()> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.half.width() {
            return Err(Error::Shape(format!("{:?} half expects frames × {}, got {s:?}", self.half, self.half.width())));
        }
        if s[0] == 0 || s[0] % DOWNSAMPLE != 0 {
            return Err(Error::Invalid(format!(
                "{} frames is not a multiple of {DOWNSAMPLE}; crop the clip first",
                s[0]
            )));
        }
        Ok(())
    }

    pub fn encode_normalized<F: Real>(&self, g: &mut Graph<'_, F>, xn: Var) -> Result<Var> {
        self.check_input(g, xn)?;
        let mut h = xn;
        for c in &self.enc {
            h = c.forward(g, h)?;
            h = g.relu(h);
        }
        Ok(self.proj.forward(g, h)?)
    }

    /// `z: [steps, code_dim]` → raw pose `[steps * 8, width]`.
    pub fn decode<F: Real>(&self, g: &mut Graph<'_, F>, z: Var) -> Result<Var> {
        let y = self.decode_normalized(g, z)?;
        self.denormalize(g, y)
    }

    pub fn decode_normalized<F: Real>(&self, g: &mut Graph<'_, F>, z: Var) -> Result<Var> {
        let mut h = z;
        for c in &self.dec {
            h = c.forward(g, h)?;
            h = g.relu(h);
        }
        Ok(self.out.forward(g, h)?)
    }
}

/// Nearest codebook row by Euclidean distance; ties go to the lower index.
pub fn nearest_codes<F: Real>(latent: &Tensor<F>, book: &Tensor<F>) -> Result<Vec<usize>> {
    if book.rank() != 2 || book.rows() == 0 {
        return Err(Error::Invalid("codebook is empty".into()));
    }
    if latent.rank() != 2 || latent.cols() != book.cols() {
        return Err(Error::Shape(format!("latent {:?} vs codebook {:?}", latent.shape(), book.shape())));
    }
    let k = book.rows();
    let codes = (0..latent.rows())
        .map(|r| {
            let z = latent.row(r);
            let mut best = (f64::INFINITY, 0);
            for e in 0..k {
                let d: f64 = z
                    .iter()
                    .zip(book.row(e))
                    .map(|(a, b)| {
                        let d = a.to_f64().unwrap() - b.to_f64().unwrap();
                        d * d
                    })
                    .sum();
                if d < best.0 {
                    best = (d, e);
                }
            }
            best.1
        })
        .collect();
    Ok(codes)
}

/// Codes and their codebook rows.
pub fn quantize<F: Real>(latent: &Tensor<F>, book: &Tensor<F>) -> Result<(Vec<usize>, Tensor<F>)> {
    let codes = nearest_codes(latent, book)?;
    let mut data = Vec::with_capacity(codes.len() * book.cols());
    for c in &codes {
        data.extend_from_slice(book.row(*c));
    }
    Ok((codes.clone(), Tensor::new(vec![codes.len(), book.cols()], data)?))
}

/// `MSE(x, x̂) + ‖sg(z) − q‖² + β‖z − sg(q)‖²`, squared norms as per-element means.
pub fn vqvae_loss(x: &Tensor<f64>, x_hat: &Tensor<f64>, latent: &Tensor<f64>, quantized: &Tensor<f64>, beta: f64) -> Result<f64> {
    if x.shape() != x_hat.shape() || latent.shape() != quantized.shape() {
        return Err(Error::Shape("vqvae_loss operands differ in shape".into()));
    }
    let mse = |a: &Tensor<f64>, b: &Tensor<f64>| {
        a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len().max(1) as f64
    };
    let lat = mse(latent, quantized);
    Ok(mse(x, x_hat) + lat + beta * lat)
}

/// Graph outputs for one half of one clip.
pub struct VqStep {
    pub loss: Var,
    /// Reconstruction in raw pose units.
    pub recon: Var,
    pub latent: Var,
    pub codes: Vec<usize>,
}

/// Builds the full training loss for one half, with the straight-through
/// estimator between quantizer and decoder. The reconstruction term is
/// measured on standardized pose columns.
pub fn vq_step<F: Real>(g: &mut Graph<'_, F>, vq: &HalfVq, x: Var, beta: f64) -> Result<VqStep> {
    vq.check_input(g, x)?;
    let xn = vq.normalize(g, x)?;
    let z = vq.encode_normalized(g, xn)?;
    let book = g.param(&vq.codebook_name())?;
    let codes = nearest_codes(g.value(z), g.value(book))?;
    let q = g.gather_rows(book, &codes)?;
    let zq = g.straight_through(z, q)?;
    let rn = vq.decode_normalized(g, zq)?;
    let rec = g.mse(xn, rn)?;
    let recon = vq.denormalize(g, rn)?;
    let zd = g.detach(z);
    let qd = g.detach(q);
    let book_term = g.mse(zd, q)?;
    let commit = g.mse(z, qd)?;
    let commit = g.scale(commit, F::of(beta));
    let l = g.add(rec, book_term)?;
    let loss = g.add(l, commit)?;
    Ok(VqStep { loss, recon, latent: z, codes })
}

pub fn vq_encode(store: &ParameterStore<f32>, cfg: &VqConfig, half: Half, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let vq = HalfVq::new(half, cfg);
    let mut g = Graph::with_store(store);
    let xv = g.constant(x.clone());
    let z = vq.encode(&mut g, xv)?;
    Ok(g.value(z).clone())
}

pub fn vq_decode_half(store: &ParameterStore<f32>, cfg: &VqConfig, half: Half, codes: &[usize]) -> Result<Tensor<f32>> {
    let vq = HalfVq::new(half, cfg);
    if let Some(c) = codes.iter().find(|c| **c >= cfg.codebook_size) {
        return Err(Error::Invalid(format!("code {c} out of range [0, {})", cfg.codebook_size)));
    }
    if codes.is_empty() {
        return Err(Error::EmptyInput("no codes to decode".into()));
    }
    let mut g = Graph::with_store(store);
    let book = g.param(&vq.codebook_name())?;
    let q = g.gather_rows(book, codes)?;
    let y = vq.decode(&mut g, q)?;
    Ok(g.value(y).clone())
}

/// Decodes both code streams into a full pose.
pub fn vq_decode(store: &ParameterStore<f32>, cfg: &VqConfig, codes: &PoseCodeSequence) -> Result<PoseSequence> {
    if codes.upper.len() != codes.lower.len() {
        return Err(Error::Shape("upper and lower code streams differ in length".into()));
    }
    let split = HalfBodySplit {
        upper: vq_decode_half(store, cfg, Half::Upper, &codes.upper)?,
        lower: vq_decode_half(store, cfg, Half::Lower, &codes.lower)?,
    };
    PoseSequence::new(merge_body(&split)?, POSE_FPS)
}

pub fn pose_to_codes(store: &ParameterStore<f32>, cfg: &VqConfig, pose: &PoseSequence) -> Result<PoseCodeSequence> {
    let split = split_body(&pose.data)?;
    let mut streams = Vec::with_capacity(2);
    for half in Half::BOTH {
        let z = vq_encode(store, cfg, half, half.pick(&split))?;
        let book = store.require(&HalfVq::new(half, cfg).codebook_name())?;
        streams.push(nearest_codes(&z, book)?);
    }
    let lower = streams.pop().unwrap();
    let upper = streams.pop().unwrap();
    Ok(PoseCodeSequence { upper, lower, downsample_rate: DOWNSAMPLE })
}

/// Encode, quantize, decode.
pub fn reconstruct(store: &ParameterStore<f32>, cfg: &VqConfig, pose: &PoseSequence) -> Result<PoseSequence> {
    vq_decode(store, cfg, &pose_to_codes(store, cfg, pose)?)
}

/// Mean squared error of [`reconstruct`] over clips and all 72 columns.
pub fn reconstruction_mse(store: &ParameterStore<f32>, cfg: &VqConfig, poses: &[PoseSequence]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for p in poses {
        let r = reconstruct(store, cfg, p)?;
        for (a, b) in p.data.data().iter().zip(r.data.data()) {
            let d = (*a - *b) as f64;
            sum += d * d;
        }
        n += p.data.len();
    }
    if n == 0 {
        return Err(Error::EmptyInput("no clips".into()));
    }
    Ok(sum / n as f64)
}

/// Fraction of codebook entries chosen at least once, per half.
pub fn codebook_usage(store: &ParameterStore<f32>, cfg: &VqConfig, poses: &[PoseSequence]) -> Result<(f64, f64)> {
    let mut used = [vec![false; cfg.codebook_size], vec![false; cfg.codebook_size]];
    for p in poses {
        let c = pose_to_codes(store, cfg, p)?;
        for (u, stream) in used.iter_mut().zip([&c.upper, &c.lower]) {
            for k in stream {
                u[*k] = true;
            }
        }
    }
    let frac = |u: &[bool]| u.iter().filter(|b| **b).count() as f64 / u.len() as f64;
    Ok((frac(&used[0]), frac(&used[1])))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct VqEpochLog {
    pub stage: &'static str,
    pub epoch: usize,
    pub loss: f64,
    pub recon_mse: f64,
    pub usage_upper: f64,
    pub usage_lower: f64,
    pub skipped: usize,
    pub wall_s: f64,
}

/// Seeds each codebook with encoder outputs sampled from the training clips,
/// so every entry starts inside the latent distribution.
fn init_codebooks(store: &mut ParameterStore<f32>, cfg: &VqConfig, clips: &[HalfBodySplit], rng: &mut ChaCha8Rng) -> Result<()> {
    for half in Half::BOTH {
        let vq = HalfVq::new(half, cfg);
        let mut pool: Vec<Vec<f32>> = Vec::new();
        for c in clips {
            let z = vq_encode(store, cfg, half, half.pick(c))?;
            pool.extend((0..z.rows()).map(|r| z.row(r).to_vec()));
        }
        let mut book = Vec::with_capacity(cfg.codebook_size * cfg.code_dim);
        for _ in 0..cfg.codebook_size {
            let row = &pool[rng.gen_range(0..pool.len())];
            book.extend(row.iter().map(|v| v + rng.gen_range(-1e-3..1e-3)));
        }
        store.set(vq.codebook_name(), Tensor::new(vec![cfg.codebook_size, cfg.code_dim], book)?);
    }
    Ok(())
}

/// Per-column mean and floored population std of each half over `clips`.
pub fn set_pose_stats(store: &mut ParameterStore<f32>, clips: &[&PoseSequence]) -> Result<()> {
    let splits: Vec<HalfBodySplit> = clips.iter().map(|p| split_body(&p.data)).collect::<Result<_>>()?;
    for half in Half::BOTH {
        let w = half.width();
        let (mut sum, mut sq, mut n) = (vec![0.0f64; w], vec![0.0f64; w], 0usize);
        for s in &splits {
            let t = half.pick(s);
            for r in 0..t.rows() {
                for (c, v) in t.row(r).iter().enumerate() {
                    sum[c] += *v as f64;
                    sq[c] += (*v as f64) * (*v as f64);
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f32> = sum.iter().map(|v| (v / n) as f32).collect();
        let std: Vec<f32> = sq
            .iter()
            .zip(&sum)
            .map(|(q, s)| ((q / n - (s / n) * (s / n)).max(0.0).sqrt() as f32).max(STD_FLOOR))
            .collect();
        let (m, sd) = half.stats_names();
        store.set(m, Tensor::new(vec![w], mean)?);
        store.set(sd, Tensor::new(vec![w], std)?);
    }
    store.freeze(STATS_PREFIX);
    Ok(())
}

fn crop_split(pose: &PoseSequence, len: usize, rng: &mut ChaCha8Rng) -> Result<HalfBodySplit> {
    let start = if pose.frames() > len { rng.gen_range(0..=(pose.frames() - len) / DOWNSAMPLE) * DOWNSAMPLE } else { 0 };
    split_body(&pose.crop(start, len)?.data)
}

/// Moves every codebook entry unused this epoch onto a latent sampled from
/// the epoch's encoder outputs.
fn restart_dead_codes(
    store: &mut ParameterStore<f32>,
    halves: &[HalfVq; 2],
    used: &[Vec<bool>; 2],
    latents: &[Vec<Vec<f32>>; 2],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for (k, vq) in halves.iter().enumerate() {
        if latents[k].is_empty() || used[k].iter().all(|u| *u) {
            continue;
        }
        let name = vq.codebook_name();
        let mut book = store.require(&name)?.clone();
        let d = book.cols();
        for (e, u) in used[k].iter().enumerate() {
            if !*u {
                let src = &latents[k][rng.gen_range(0..latents[k].len())];
                for (dst, v) in book.data_mut()[e * d..(e + 1) * d].iter_mut().zip(src) {
                    *dst = v + rng.gen_range(-1e-3..1e-3);
                }
            }
        }
        store.set(name, book);
    }
    Ok(())
}

pub fn init_store(cfg: &Config) -> Result<ParameterStore<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7671_0000);
    let mut store = ParameterStore::new();
    for half in Half::BOTH {
        HalfVq::new(half, &cfg.vqvae).init(&mut store, &mut rng)?;
    }
    Ok(store)
}

/// Trains both half-body autoencoders jointly. Clips shorter than the crop
/// length are skipped and counted.
pub fn train_vqvae(
    poses: &[PoseSequence],
    cfg: &Config,
    mut on_epoch: impl FnMut(&VqEpochLog),
) -> Result<ModelCheckpoint> {
    let vc = &cfg.vqvae;
    let usable: Vec<&PoseSequence> = poses.iter().filter(|p| p.frames() >= vc.crop_frames).collect();
    let skipped = poses.len() - usable.len();
    if skipped > 0 {
        log::warn!("skipping {skipped} pose clips shorter than {} frames", vc.crop_frames);
    }
    if usable.is_empty() {
        return Err(Error::EmptyInput("no pose clips long enough for VQ-VAE training".into()));
    }
    let mut store = init_store(cfg)?;
    set_pose_stats(&mut store, &usable)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7671_7661);
    let first: Vec<HalfBodySplit> =
        usable.iter().map(|p| crop_split(p, vc.crop_frames, &mut rng)).collect::<Result<_>>()?;
    init_codebooks(&mut store, vc, &first, &mut rng)?;
    let halves = [HalfVq::new(Half::Upper, vc), HalfVq::new(Half::Lower, vc)];
    let mut opt = OptimizerState::new(AdamConfig { lr: vc.lr, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 1..=vc.epochs {
        let start = std::time::Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut rec_sum) = (0.0, 0.0);
        let mut used = [vec![false; vc.codebook_size], vec![false; vc.codebook_size]];
        let mut latents: [Vec<Vec<f32>>; 2] = [Vec::new(), Vec::new()];
        for batch in order.chunks(vc.batch_size) {
            let mut grads = Gradients::new();
            for &i in batch {
                let split = crop_split(usable[i], vc.crop_frames, &mut rng)?;
                let mut g = Graph::with_store(&store);
                let mut total = None;
                for (k, vq) in halves.iter().enumerate() {
                    let x = g.constant(vq.half.pick(&split).clone());
                    let step = vq_step(&mut g, vq, x, vc.beta_commit)?;
                    let sq: f64 = g
                        .value(x)
                        .data()
                        .iter()
                        .zip(g.value(step.recon).data())
                        .map(|(a, b)| ((a - b) as f64).powi(2))
                        .sum();
                    rec_sum += sq / (vc.crop_frames * crate::pose::POSE_WIDTH) as f64;
                    for c in &step.codes {
                        used[k][*c] = true;
                    }
                    let z = g.value(step.latent);
                    latents[k].extend((0..z.rows()).map(|r| z.row(r).to_vec()));
                    total = Some(match total {
                        None => step.loss,
                        Some(t) => g.add(t, step.loss)?,
                    });
                }
                let loss = g.scale(total.unwrap(), 1.0 / batch.len() as f32);
                loss_sum += g.value(loss).data()[0] as f64 * batch.len() as f64;
                grads.accumulate(&g.backward(loss)?.param_grads())?;
            }
            adam_step(&mut store, &grads, &mut opt)?;
        }
        let frac = |u: &[bool]| u.iter().filter(|b| **b).count() as f64 / u.len() as f64;
        let usage = [frac(&used[0]), frac(&used[1])];
        if vc.restart_dead_codes && epoch < vc.epochs {
            restart_dead_codes(&mut store, &halves, &used, &latents, &mut rng)?;
        }
        on_epoch(&VqEpochLog {
            stage: STAGE_VQVAE,
            epoch,
            loss: loss_sum / usable.len() as f64,
            recon_mse: rec_sum / usable.len() as f64,
            usage_upper: usage[0],
            usage_lower: usage[1],
            skipped,
            wall_s: start.elapsed().as_secs_f64(),
        });
    }
    let mut ckpt = ModelCheckpoint::new(store, STAGE_VQVAE, vc.epochs, cfg);
    ckpt.rng = Some(RngState::capture(&rng));
    ckpt.optimizer = Some(opt);
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_code_examples() {
        let book = Tensor::new(vec![2, 2], vec![0.0f64, 0.0, 1.0, 1.0]).unwrap();
        let q = |a: f64, b: f64| nearest_codes(&Tensor::new(vec![1, 2], vec![a, b]).unwrap(), &book).unwrap()[0];
        assert_eq!(q(0.9, 0.8), 1);
        assert_eq!(q(1.0, 1.0), 1);
        assert_eq!(q(0.5, 0.5), 0);
        let (_, qz) = quantize(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(), &book).unwrap();
        assert_eq!(qz.data(), &[1.0, 1.0]);
        assert!(nearest_codes(&Tensor::<f64>::zeros(&[1, 2]), &Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn loss_examples() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
        assert_eq!(vqvae_loss(&x, &x, &z, &z, 0.25).unwrap(), 0.0);
        let q = Tensor::new(vec![1, 2], vec![0.6, -0.3]).unwrap();
        // per-element mean of δ² = (0.01 + 0.04) / 2
        let want = 1.25 * 0.025;
        assert!((vqvae_loss(&x, &x, &z, &q, 0.25).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn shapes_through_the_autoencoder() {
        let cfg = VqConfig { codebook_size: 16, code_dim: 8, hidden: 8, ..VqConfig::default() };
        let mut store = ParameterStore::<f32>::new();
        let vq = HalfVq::new(Half::Upper, &cfg);
        vq.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let z = vq_encode(&store, &cfg, Half::Upper, &Tensor::zeros(&[240, UPPER_WIDTH])).unwrap();
        assert_eq!(z.shape(), &[30, 8]);
        assert!(z.data().iter().all(|v| *v == 0.0));
        assert_eq!(vq_encode(&store, &cfg, Half::Upper, &Tensor::zeros(&[8, UPPER_WIDTH])).unwrap().rows(), 1);
        let err = vq_encode(&store, &cfg, Half::Upper, &Tensor::zeros(&[12, UPPER_WIDTH])).unwrap_err();
        assert!(err.to_string().contains("crop"));
        let y = vq_decode_half(&store, &cfg, Half::Upper, &[3; 30]).unwrap();
        assert_eq!(y.shape(), &[240, UPPER_WIDTH]);
        assert!(vq_decode_half(&store, &cfg, Half::Upper, &[16]).is_err());
    }
}
