//! Genre Token Network: a strided 2-D conv stack and GRU compress a log-mel
//! image into a reference embedding, which queries ten learnable genre
//! tokens. The attention weights are the genre probabilities; their weighted
//! sum of value-projected tokens is the genre embedding.

use std::io::Write as _;
use std::path::Path;

use gtnb_nn::layers::{uniform, Conv2d, Gru, LayerNorm, Linear};
use gtnb_nn::{adam_step, AdamConfig, Graph, OptimizerState, ParameterStore, Real, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::N_MELS;
use crate::checkpoint::{ModelCheckpoint, RngState, STAGE_GTN};
use crate::config::{Config, GtnConfig};
use crate::error::{io_at, Error, Result};
use crate::genre::{GenreLabel, N_GENRES};

pub const PREFIX: &str = "gtn";
const TOKENS: &str = "gtn.tokens";

#[derive(Clone, Debug, PartialEq)]
pub struct GenreInference {
    /// Probability per genre id.
    pub weights: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl GenreInference {
    pub fn argmax(&self) -> GenreLabel {
        let i = gtnb_nn::functional::argmax(&self.weights);
        GenreLabel::from_id(i).expect("weight vector has one entry per genre")
    }
}

/// Graph outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GtnVars {
    /// `[1, 10]` pre-softmax scores.
    pub logits: Var,
    /// `[1, 10]`.
    pub weights: Var,
    /// `[1, embed_dim]`.
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct GenreTokenNetwork {
    pub cfg: GtnConfig,
    convs: Vec<Conv2d>,
    norm: LayerNorm,
    gru: Gru,
    q: Linear,
    k: Linear,
    v: Linear,
}

/// Mel columns left after `n` stride-2, pad-1, 3-wide conv layers.
fn reduced(mut w: usize, n: usize) -> usize {
    for _ in 0..n {
        w = (w + 2 - 3) / 2 + 1;
    }
    w
}

impl GenreTokenNetwork {
    pub fn new(cfg: &GtnConfig) -> Self {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(Conv2d::new(format!("gtn.enc.conv{i}"), c_in, c, (3, 3), (2, 2), (1, 1)));
            c_in = c;
        }
        let gru_in = c_in * reduced(N_MELS, cfg.channels.len());
        let e = cfg.embed_dim;
        Self {
            cfg: cfg.clone(),
            convs,
            norm: LayerNorm::new("gtn.enc.norm", gru_in),
            gru: Gru::new("gtn.enc.gru", gru_in, e),
            q: Linear::new("gtn.attn.q", e, e),
            k: Linear::new("gtn.attn.k", e, e),
            v: Linear::new("gtn.attn.v", e, e),
        }
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<F>, rng: &mut R) -> Result<()> {
        for c in &self.convs {
            c.init(store, rng)?;
        }
        self.norm.init(store)?;
        self.gru.init(store, rng)?;
        let e = self.cfg.embed_dim;
        store.insert(TOKENS, uniform(rng, &[N_GENRES, e], 1.0 / (e as f64).sqrt()))?;
        if self.cfg.project_tokens {
            for l in [&self.q, &self.k, &self.v] {
                l.init(store, rng)?;
            }
        }
        Ok(())
    }

    /// `mel: [frames, 80]` → reference embedding `[1, embed_dim]`.
    pub fn encode<F: Real>(&self, g: &mut Graph<'_, F>, mel: Var) -> Result<Var> {
        let s = g.shape(mel).to_vec();
        if s.len() != 2 || s[1] != N_MELS || s[0] == 0 {
            return Err(Error::Shape(format!("mel must be frames × {N_MELS}, got {s:?}")));
        }
        let x = g.affine(mel, F::of(self.cfg.input_scale), F::zero());
        let mut x = g.reshape(x, vec![1, s[0], N_MELS])?;
        for c in &self.convs {
            x = c.forward(g, x)?;
            x = g.relu(x);
        }
        let sh = g.shape(x).to_vec();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        // [C, H, W] → [H, W·C]: one GRU step per remaining time row.
        let x = g.reshape(x, vec![c, h * w])?;
        let x = g.transpose(x)?;
        let x = g.reshape(x, vec![h, w * c])?;
        let x = self.norm.forward(g, x)?;
        Ok(self.gru.forward(g, x)?)
    }

    /// Value-projected tokens `[10, embed_dim]`.
    pub fn values<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var> {
        let tokens = g.param(TOKENS)?;
        if self.cfg.project_tokens {
            Ok(self.v.forward(g, tokens)?)
        } else {
            Ok(tokens)
        }
    }

    pub fn attend<F: Real>(&self, g: &mut Graph<'_, F>, reference: Var) -> Result<GtnVars> {
        let tokens = g.param(TOKENS)?;
        let (q, k) = if self.cfg.project_tokens {
            (self.q.forward(g, reference)?, self.k.forward(g, tokens)?)
        } else {
            (reference, tokens)
        };
        let s = g.matmul_t(q, k, false, true)?;
        let logits = g.scale(s, F::one() / F::of(self.cfg.embed_dim as f64).sqrt());
        let weights = g.softmax_rows(logits, None)?;
        let v = self.values(g)?;
        let embedding = g.matmul(weights, v)?;
        Ok(GtnVars { logits, weights, embedding })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, mel: Var) -> Result<GtnVars> {
        let r = self.encode(g, mel)?;
        self.attend(g, r)
    }

    /// Embedding formed from fixed token weights (e.g. a one-hot label).
    pub fn embed_weights<F: Real>(&self, g: &mut Graph<'_, F>, weights: &[f64]) -> Result<Var> {
        if weights.len() != N_GENRES {
            return Err(Error::Shape(format!("{} token weights, expected {N_GENRES}", weights.len())));
        }
        let w = g.constant(Tensor::new(vec![1, N_GENRES], weights.iter().map(|v| F::of(*v)).collect())?);
        let v = self.values(g)?;
        Ok(g.matmul(w, v)?)
    }
}

fn to_f64<F: Real>(t: &Tensor<F>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64().unwrap()).collect()
}

pub fn reference_encode(store: &ParameterStore<f32>, cfg: &GtnConfig, mel: &Tensor<f32>) -> Result<Vec<f64>> {
    let net = GenreTokenNetwork::new(cfg);
    let mut g = Graph::with_store(store);
    let x = g.constant(mel.clone());
    let r = net.encode(&mut g, x)?;
    Ok(to_f64(g.value(r)))
}

pub fn genre_token_attention(store: &ParameterStore<f32>, cfg: &GtnConfig, reference: &[f64]) -> Result<GenreInference> {
    if reference.len() != cfg.embed_dim {
        return Err(Error::Shape(format!("reference of {} values, expected {}", reference.len(), cfg.embed_dim)));
    }
    let net = GenreTokenNetwork::new(cfg);
    let mut g = Graph::with_store(store);
    let r = g.constant(Tensor::new(vec![1, cfg.embed_dim], reference.iter().map(|v| *v as f32).collect())?);
    let out = net.attend(&mut g, r)?;
    Ok(GenreInference { weights: to_f64(g.value(out.weights)), embedding: to_f64(g.value(out.embedding)) })
}

pub fn gtn_forward(store: &ParameterStore<f32>, cfg: &GtnConfig, mel: &Tensor<f32>) -> Result<GenreInference> {
    let net = GenreTokenNetwork::new(cfg);
    let mut g = Graph::with_store(store);
    let x = g.constant(mel.clone());
    let out = net.forward(&mut g, x)?;
    Ok(GenreInference { weights: to_f64(g.value(out.weights)), embedding: to_f64(g.value(out.embedding)) })
}

/// Mean over clips of `CE(g_t, ĝ_t)`.
pub fn gtn_loss(labels: &[GenreLabel], inferences: &[GenreInference]) -> Result<f64> {
    if labels.len() != inferences.len() {
        return Err(Error::Shape(format!("{} labels for {} inferences", labels.len(), inferences.len())));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("gtn_loss over zero clips".into()));
    }
    let mut total = 0.0;
    for (l, inf) in labels.iter().zip(inferences) {
        total += gtnb_nn::functional::cross_entropy(&inf.weights, &l.one_hot())?;
    }
    Ok(total / labels.len() as f64)
}

/// One labelled clip for genre training.
#[derive(Clone, Debug)]
pub struct GenreExample {
    pub clip_id: String,
    pub mel: Tensor<f32>,
    pub label: GenreLabel,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EpochLog {
    pub stage: &'static str,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_s: f64,
}

fn crop_mel(mel: &Tensor<f32>, len: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let t = mel.rows();
    if t <= len {
        return mel.clone();
    }
    let start = rng.gen_range(0..=t - len);
    Tensor::new(vec![len, N_MELS], mel.data()[start * N_MELS..(start + len) * N_MELS].to_vec()).expect("crop")
}

pub fn init_store(cfg: &Config) -> Result<ParameterStore<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParameterStore::new();
    GenreTokenNetwork::new(&cfg.gtn).init(&mut store, &mut rng)?;
    Ok(store)
}

/// Trains the GTN on the genre cross-entropy alone. `on_epoch` sees each epoch's log.
pub fn pretrain_gtn(
    data: &[GenreExample],
    cfg: &Config,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<ModelCheckpoint> {
    if data.is_empty() {
        return Err(Error::EmptyInput("GTN pre-training needs at least one clip".into()));
    }
    let gc = &cfg.gtn;
    let net = GenreTokenNetwork::new(gc);
    let mut store = init_store(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6774_6e00);
    let mut opt = OptimizerState::new(AdamConfig { lr: gc.lr, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=gc.epochs {
        let start = std::time::Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(gc.batch_size) {
            let mut g = Graph::with_store(&store);
            let mut logits = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let mel = crop_mel(&data[i].mel, gc.crop_frames, &mut rng);
                let x = g.constant(mel);
                let out = net.forward(&mut g, x)?;
                let w = g.value(out.weights).data().to_vec();
                let pred = (0..N_GENRES).max_by(|a, b| w[*a].total_cmp(&w[*b]).then(b.cmp(a))).unwrap();
                correct += usize::from(pred == data[i].label.id());
                logits.push(out.logits);
                targets.push(data[i].label.id());
            }
            let all = g.concat_rows(&logits)?;
            let loss = g.cross_entropy_logits(all, &targets)?;
            loss_sum += g.value(loss).data()[0] as f64 * batch.len() as f64;
            let grads = g.backward(loss)?.param_grads();
            drop(g);
            adam_step(&mut store, &grads, &mut opt)?;
        }
        on_epoch(&EpochLog {
            stage: STAGE_GTN,
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            wall_s: start.elapsed().as_secs_f64(),
        });
    }
    let mut ckpt = ModelCheckpoint::new(store, STAGE_GTN, gc.epochs, cfg);
    ckpt.rng = Some(RngState::capture(&rng));
    ckpt.optimizer = Some(opt);
    Ok(ckpt)
}

/// Accuracy of `argmax(weights)` against labels.
pub fn genre_accuracy(store: &ParameterStore<f32>, cfg: &GtnConfig, data: &[GenreExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("accuracy over zero clips".into()));
    }
    let mut hit = 0;
    for ex in data {
        hit += usize::from(gtn_forward(store, cfg, &ex.mel)?.argmax() == ex.label);
    }
    Ok(hit as f64 / data.len() as f64)
}

/// Writes `clip_id,genre,w_0..w_9,e_0..e_{d-1}`, one row per clip.
pub fn export_embeddings(ckpt: &ModelCheckpoint, data: &[GenreExample], out_path: &Path) -> Result<()> {
    let cfg = &ckpt.config.gtn;
    let mut out = String::from("clip_id,genre");
    for i in 0..N_GENRES {
        out.push_str(&format!(",w_{i}"));
    }
    for i in 0..cfg.embed_dim {
        out.push_str(&format!(",e_{i}"));
    }
    out.push('\n');
    for ex in data {
        let inf = gtn_forward(&ckpt.params, cfg, &ex.mel)?;
        out.push_str(&ex.clip_id);
        out.push(',');
        out.push_str(ex.label.code());
        for v in inf.weights.iter().chain(&inf.embedding) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(out_path).map_err(io_at(out_path))?;
    f.write_all(out.as_bytes()).map_err(io_at(out_path))
}

/// Parsed embedding export: `(clip_id, genre, weights, embedding)` rows.
pub type EmbeddingRow = (String, GenreLabel, Vec<f64>, Vec<f64>);

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = std::fs::read_to_string(path).map_err(io_at(path))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 2 + N_GENRES {
            return Err(Error::Format(format!("{}:{}: too few columns", path.display(), n + 1)));
        }
        let nums = f[2..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("{}:{}: bad number", path.display(), n + 1))))
            .collect::<Result<Vec<_>>>()?;
        rows.push((f[0].to_string(), GenreLabel::from_code(f[1])?, nums[..N_GENRES].to_vec(), nums[N_GENRES..].to_vec()));
    }
    Ok(rows)
}

/// Mean inter-class over mean intra-class Euclidean distance.
pub fn separation_ratio(points: &[(GenreLabel, Vec<f64>)]) -> f64 {
    let (mut inter, mut n_inter, mut intra, mut n_intra) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = points[i].1.iter().zip(&points[j].1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if points[i].0 == points[j].0 {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let intra = intra / n_intra.max(1) as f64;
    let inter = inter / n_inter.max(1) as f64;
    if intra == 0.0 {
        return f64::INFINITY;
    }
    inter / intra
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GtnConfig {
        GtnConfig { channels: vec![2, 2, 3], embed_dim: 6, ..GtnConfig::default() }
    }

    #[test]
    fn width_arithmetic() {
        assert_eq!(reduced(80, 6), 2);
        assert_eq!(reduced(240, 6), 4);
        assert_eq!(reduced(1, 6), 1);
    }

    #[test]
    fn loss_examples() {
        let l = |id| GenreLabel::from_id(id).unwrap();
        let one_hot = GenreInference { weights: l(3).one_hot().to_vec(), embedding: vec![] };
        assert!(gtn_loss(&[l(3)], &[one_hot.clone()]).unwrap().abs() < 1e-9);
        let uni = GenreInference { weights: vec![0.1; 10], embedding: vec![] };
        assert!((gtn_loss(&[l(0), l(5)], &[uni.clone(), uni.clone()]).unwrap() - 10f64.ln()).abs() < 1e-9);
        let mut half = vec![0.0; 10];
        half[1] = 0.5;
        half[2] = 0.5;
        let h = GenreInference { weights: half, embedding: vec![] };
        let v = gtn_loss(&[l(1), l(3)], &[h, one_hot]).unwrap();
        assert!((v - 0.346_574).abs() < 1e-6);
        assert!(gtn_loss(&[l(1)], &[]).is_err());
    }

    #[test]
    fn embedding_matches_weighted_values() {
        let cfg = small();
        let mut store = ParameterStore::<f32>::new();
        GenreTokenNetwork::new(&cfg).init(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mel = Tensor::new(vec![17, N_MELS], (0..17 * N_MELS).map(|i| ((i % 13) as f32) - 6.0).collect()).unwrap();
        let inf = gtn_forward(&store, &cfg, &mel).unwrap();
        assert!((inf.weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let net = GenreTokenNetwork::new(&cfg);
        let mut g = Graph::with_store(&store);
        let v = net.values(&mut g).unwrap();
        let vals = g.value(v).clone();
        for c in 0..cfg.embed_dim {
            let want: f64 = (0..N_GENRES).map(|k| inf.weights[k] * vals.get2(k, c) as f64).sum();
            assert!((want - inf.embedding[c]).abs() < 1e-5);
        }
        assert!(gtn_forward(&store, &cfg, &Tensor::zeros(&[10, 79])).is_err());
    }
}
