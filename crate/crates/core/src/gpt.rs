//! Cross-conditional GPT over four segments `[E; M; U; L]` of equal length
//! T′: energy and music condition embeddings, then upper and lower code
//! embeddings. Step `t` of any segment attends to steps `≤ t` of every
//! segment. The upper/lower heads read the U/L rows; row `t` predicts code
//! `t + 1`.

use std::sync::Arc;

use gtnb_nn::layers::{Embedding, LayerNorm, Linear, MultiHeadAttention};
use gtnb_nn::{Graph, ParameterStore, Real, Tensor, Var};
use rand::Rng;

use crate::audio::{columns, MusicFeatureClip};
use crate::config::GptConfig;
use crate::error::{Error, Result};
use crate::gtn::GenreInference;
use crate::vq::{PoseCodeSequence, DOWNSAMPLE};

pub const PREFIX: &str = "gpt";
/// Standardization statistics; never trained.
pub const STATS_PREFIX: &str = "gpt.stats";
pub const N_SEGMENTS: usize = 4;

pub mod segment {
    pub const ENERGY: usize = 0;
    pub const MUSIC: usize = 1;
    pub const UPPER: usize = 2;
    pub const LOWER: usize = 3;
}

const MUSIC_MEAN: &str = "gpt.stats.music_mean";
const MUSIC_STD: &str = "gpt.stats.music_std";
const ENERGY_MEAN: &str = "gpt.stats.energy_mean";
const ENERGY_STD: &str = "gpt.stats.energy_std";

/// Condition segments, each `[T′, d_model]`, genre embedding already added.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSequence {
    pub energy: Tensor<f32>,
    pub music: Tensor<f32>,
}

/// Per-step probabilities, each `[T′, codebook]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub upper: Tensor<f64>,
    pub lower: Tensor<f64>,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct CrossCondGpt {
    pub cfg: GptConfig,
    pub codebook: usize,
    music: Linear,
    energy: Linear,
    emb_upper: Embedding,
    emb_lower: Embedding,
    pos: Embedding,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head_upper: Linear,
    head_lower: Linear,
}

/// `mask[i * n + j]`: row `i` may attend to column `j` iff `j`'s step ≤ `i`'s.
pub fn cross_conditional_mask(steps: usize) -> Arc<Vec<bool>> {
    let n = N_SEGMENTS * steps;
    Arc::new((0..n * n).map(|k| (k % n) % steps <= (k / n) % steps).collect())
}

impl CrossCondGpt {
    pub fn new(cfg: &GptConfig, codebook: usize) -> Self {
        let d = cfg.d_model;
        let blocks = (0..cfg.blocks)
            .map(|i| Block {
                ln1: LayerNorm::new(format!("gpt.block{i}.ln1"), d),
                attn: MultiHeadAttention::new(format!("gpt.block{i}.attn"), d, cfg.heads),
                ln2: LayerNorm::new(format!("gpt.block{i}.ln2"), d),
                fc1: Linear::new(format!("gpt.block{i}.fc1"), d, 4 * d),
                fc2: Linear::new(format!("gpt.block{i}.fc2"), 4 * d, d),
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            codebook,
            music: Linear::new("gpt.cond.music", columns::WIDTH, d),
            energy: Linear::new("gpt.cond.energy", 1, d),
            emb_upper: Embedding::new("gpt.emb_upper", codebook, d),
            emb_lower: Embedding::new("gpt.emb_lower", codebook, d),
            pos: Embedding::new("gpt.pos", N_SEGMENTS * cfg.context, d),
            blocks,
            ln_f: LayerNorm::new("gpt.ln_f", d),
            head_upper: Linear::new("gpt.head_upper", d, codebook),
            head_lower: Linear::new("gpt.head_lower", d, codebook),
        }
    }

    /// Random body, zero heads (uniform initial predictions), identity
    /// standardization.
    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<F>, rng: &mut R) -> Result<()> {
        self.music.init(store, rng)?;
        self.energy.init(store, rng)?;
        self.emb_upper.init(store, rng)?;
        self.emb_lower.init(store, rng)?;
        self.pos.init(store, rng)?;
        for b in &self.blocks {
            b.ln1.init(store)?;
            b.attn.init(store, rng)?;
            b.ln2.init(store)?;
            b.fc1.init(store, rng)?;
            b.fc2.init(store, rng)?;
        }
        self.ln_f.init(store)?;
        self.head_upper.init_zero(store)?;
        self.head_lower.init_zero(store)?;
        store.insert(MUSIC_MEAN, Tensor::zeros(&[columns::WIDTH]))?;
        store.insert(MUSIC_STD, Tensor::filled(&[columns::WIDTH], F::one()))?;
        store.insert(ENERGY_MEAN, Tensor::zeros(&[1]))?;
        store.insert(ENERGY_STD, Tensor::filled(&[1], F::one()))?;
        store.freeze(STATS_PREFIX);
        Ok(())
    }

    /// Embeds standardized `music: [T, 438]` and `energy: [T, 1]`, pools ×8
    /// and adds `genre: [1, d]` to every step. Returns `(E, M)`.
    pub fn condition<F: Real>(&self, g: &mut Graph<'_, F>, music: Var, energy: Var, genre: Var) -> Result<(Var, Var)> {
        let t = g.shape(music)[0];
        if t == 0 || t % DOWNSAMPLE != 0 {
            return Err(Error::Invalid(format!("{t} feature frames is not a positive multiple of {DOWNSAMPLE}")));
        }
        if g.shape(energy)[0] != t {
            return Err(Error::Shape("music and energy frame counts differ".into()));
        }
        let zm = self.music.forward(g, music)?;
        let zm = g.avg_pool_rows(zm, DOWNSAMPLE)?;
        let ze = self.energy.forward(g, energy)?;
        let ze = g.avg_pool_rows(ze, DOWNSAMPLE)?;
        let e = g.add_row(ze, genre)?;
        let m = g.add_row(zm, genre)?;
        Ok((e, m))
    }

    /// Logits `(upper, lower)`, each `[T′, codebook]`. `e` and `m` are
    /// `[T′, d]`; code streams have length T′.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, e: Var, m: Var, upper: &[usize], lower: &[usize]) -> Result<(Var, Var)> {
        let steps = g.shape(e)[0];
        if g.shape(m)[0] != steps || upper.len() != steps || lower.len() != steps {
            return Err(Error::Shape(format!(
                "segments disagree: E {}, M {}, U {}, L {}",
                steps,
                g.shape(m)[0],
                upper.len(),
                lower.len()
            )));
        }
        if steps == 0 || steps > self.cfg.context {
            return Err(Error::Invalid(format!("{steps} steps outside context 1..={}", self.cfg.context)));
        }
        let u = self.emb_upper.forward(g, upper)?;
        let l = self.emb_lower.forward(g, lower)?;
        let x = g.concat_rows(&[e, m, u, l])?;
        let idx: Vec<usize> =
            (0..N_SEGMENTS).flat_map(|s| (0..steps).map(move |t| s * self.cfg.context + t)).collect();
        let p = self.pos.forward(g, &idx)?;
        let mut x = g.add(x, p)?;
        let mask = cross_conditional_mask(steps);
        for b in &self.blocks {
            let h = b.ln1.forward(g, x)?;
            let h = b.attn.forward(g, h, Some(mask.clone()))?;
            x = g.add(x, h)?;
            let h = b.ln2.forward(g, x)?;
            let h = b.fc1.forward(g, h)?;
            let h = g.gelu(h);
            let h = b.fc2.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let x = self.ln_f.forward(g, x)?;
        let xu = g.slice_rows(x, segment::UPPER * steps, steps)?;
        let xl = g.slice_rows(x, segment::LOWER * steps, steps)?;
        Ok((self.head_upper.forward(g, xu)?, self.head_lower.forward(g, xl)?))
    }
}

/// Standardization statistics over a set of clips: per-column mean and
/// population std (std floored so constant columns pass through unscaled).
pub fn set_feature_stats(store: &mut ParameterStore<f32>, clips: &[&MusicFeatureClip]) -> Result<()> {
    let stats = |mats: Vec<&Tensor<f32>>, width: usize| {
        let mut sum = vec![0.0f64; width];
        let mut sq = vec![0.0f64; width];
        let mut n = 0usize;
        for m in mats {
            for r in 0..m.rows() {
                for (c, v) in m.row(r).iter().enumerate() {
                    sum[c] += *v as f64;
                    sq[c] += (*v as f64) * (*v as f64);
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let std: Vec<f32> = sq
            .iter()
            .zip(&sum)
            .map(|(q, s)| {
                let var = (q / n - (s / n) * (s / n)).max(0.0);
                let sd = var.sqrt();
                if sd < 1e-6 { 1.0 } else { sd as f32 }
            })
            .collect();
        (mean, std)
    };
    let (mm, ms) = stats(clips.iter().map(|c| &c.music).collect(), columns::WIDTH);
    let (em, es) = stats(clips.iter().map(|c| &c.energy).collect(), 1);
    store.set(MUSIC_MEAN, Tensor::new(vec![columns::WIDTH], mm)?);
    store.set(MUSIC_STD, Tensor::new(vec![columns::WIDTH], ms)?);
    store.set(ENERGY_MEAN, Tensor::new(vec![1], em)?);
    store.set(ENERGY_STD, Tensor::new(vec![1], es)?);
    store.freeze(STATS_PREFIX);
    Ok(())
}

fn standardize(x: &Tensor<f32>, mean: &Tensor<f32>, std: &Tensor<f32>) -> Tensor<f32> {
    let c = x.cols();
    let (m, s) = (mean.data(), std.data());
    let data = x.data().iter().enumerate().map(|(i, v)| (v - m[i % c]) / s[i % c]).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Standardized `(music, energy)` in the store's precision, ready for
/// [`CrossCondGpt::condition`].
pub fn standardized_inputs<F: Real>(store: &ParameterStore<F>, clip: &MusicFeatureClip) -> Result<(Tensor<F>, Tensor<F>)> {
    let get = |n: &str| store.require(n).map(|t| t.cast::<f32>());
    let music = standardize(&clip.music, &get(MUSIC_MEAN)?, &get(MUSIC_STD)?);
    let energy = standardize(&clip.energy, &get(ENERGY_MEAN)?, &get(ENERGY_STD)?);
    Ok((music.cast(), energy.cast()))
}

fn genre_row<F: Real>(g: &mut Graph<'_, F>, emb: &[f64], d: usize) -> Result<Var> {
    if emb.len() != d {
        return Err(Error::Shape(format!("genre embedding of {} values, d_model is {d}", emb.len())));
    }
    Ok(g.constant(Tensor::new(vec![1, d], emb.iter().map(|v| F::of(*v)).collect())?))
}

pub fn assemble_condition(
    store: &ParameterStore<f32>,
    cfg: &GptConfig,
    codebook: usize,
    features: &MusicFeatureClip,
    genre: &GenreInference,
) -> Result<ConditionSequence> {
    let net = CrossCondGpt::new(cfg, codebook);
    let (music, energy) = standardized_inputs(store, features)?;
    let mut g = Graph::with_store(store);
    let mv = g.constant(music);
    let ev = g.constant(energy);
    let z = genre_row(&mut g, &genre.embedding, cfg.d_model)?;
    let (e, m) = net.condition(&mut g, mv, ev, z)?;
    Ok(ConditionSequence { energy: g.value(e).clone(), music: g.value(m).clone() })
}

fn softmax_table(t: &Tensor<f32>) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..t.rows())
        .map(|r| {
            let row: Vec<f64> = t.row(r).iter().map(|v| *v as f64).collect();
            gtnb_nn::functional::softmax(&row).expect("finite logits")
        })
        .collect();
    Tensor::from_rows(&rows).expect("rectangular")
}

pub fn gpt_logits(
    store: &ParameterStore<f32>,
    cfg: &GptConfig,
    codebook: usize,
    cond: &ConditionSequence,
    codes: &PoseCodeSequence,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let net = CrossCondGpt::new(cfg, codebook);
    let mut g = Graph::with_store(store);
    let e = g.constant(cond.energy.clone());
    let m = g.constant(cond.music.clone());
    let (lu, ll) = net.forward(&mut g, e, m, &codes.upper, &codes.lower)?;
    Ok((g.value(lu).clone(), g.value(ll).clone()))
}

pub fn gpt_forward(
    store: &ParameterStore<f32>,
    cfg: &GptConfig,
    codebook: usize,
    cond: &ConditionSequence,
    codes: &PoseCodeSequence,
) -> Result<ActionDistribution> {
    let (lu, ll) = gpt_logits(store, cfg, codebook, cond, codes)?;
    Ok(ActionDistribution { upper: softmax_table(&lu), lower: softmax_table(&ll) })
}

/// Rows used as predictions and their target codes. Codes may have the
/// same length as the rows (last row predicts nothing) or one more.
fn targets(rows: usize, codes: &[usize]) -> Result<(usize, &[usize])> {
    if codes.len() == rows && rows >= 2 {
        Ok((rows - 1, &codes[1..]))
    } else if codes.len() == rows + 1 && rows >= 1 {
        Ok((rows, &codes[1..]))
    } else {
        Err(Error::Shape(format!("{} codes cannot be targets for {rows} prediction rows", codes.len())))
    }
}

/// Mean over predicted steps of `Σ_{h∈{u,l}} CE(a_t^h, p_{t+1}^h)`.
pub fn gpt_loss(actions: &ActionDistribution, codes: &PoseCodeSequence) -> Result<f64> {
    let mut total = 0.0;
    let mut steps = 0;
    for (probs, stream) in [(&actions.upper, &codes.upper), (&actions.lower, &codes.lower)] {
        let (n, tgt) = targets(probs.rows(), stream)?;
        let k = probs.cols();
        for t in 0..n {
            if tgt[t] >= k {
                return Err(Error::Invalid(format!("code {} out of range for {k} classes", tgt[t])));
            }
            let mut onehot = vec![0.0; k];
            onehot[tgt[t]] = 1.0;
            total += gtnb_nn::functional::cross_entropy(probs.row(t), &onehot)?;
        }
        steps = n;
    }
    Ok(total / steps as f64)
}

/// Graph form of [`gpt_loss`] on logits.
pub fn gpt_loss_graph<F: Real>(g: &mut Graph<'_, F>, upper: Var, lower: Var, codes: &PoseCodeSequence) -> Result<Var> {
    let mut parts = Vec::with_capacity(2);
    for (logits, stream) in [(upper, &codes.upper), (lower, &codes.lower)] {
        let (n, tgt) = targets(g.shape(logits)[0], stream)?;
        let rows = g.slice_rows(logits, 0, n)?;
        parts.push(g.cross_entropy_logits(rows, tgt)?);
    }
    Ok(g.add(parts[0], parts[1])?)
}

/// `α·l_gtn + β·l_gpt`.
pub fn combined_loss(l_gtn: f64, l_gpt: f64, alpha: f64, beta: f64) -> f64 {
    alpha * l_gtn + beta * l_gpt
}

/// Fraction of steps whose argmax matches the next ground-truth code, both
/// heads pooled.
pub fn next_code_accuracy(upper: &Tensor<f32>, lower: &Tensor<f32>, codes: &PoseCodeSequence) -> Result<f64> {
    let (mut hit, mut n) = (0, 0);
    for (logits, stream) in [(upper, &codes.upper), (lower, &codes.lower)] {
        let (rows, tgt) = targets(logits.rows(), stream)?;
        for t in 0..rows {
            hit += usize::from(argmax_f32(logits.row(t)) == tgt[t]);
            n += 1;
        }
    }
    Ok(hit as f64 / n.max(1) as f64)
}

pub(crate) fn argmax_f32(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
