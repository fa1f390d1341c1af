//! Finite-difference checks of the three training objectives on toy-sized
//! 64-bit models. Each function returns the worst relative error over all
//! trainable coordinates.

use gtnb_nn::{grad_check_params, Graph, ParameterStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{columns, N_MELS};
use crate::config::{GptConfig, GtnConfig, VqConfig};
use crate::error::Result;
use crate::gpt::{gpt_loss_graph, CrossCondGpt};
use crate::gtn::GenreTokenNetwork;
use crate::vq::{quantize, vq_step, Half, HalfVq, PoseCodeSequence, DOWNSAMPLE};

const H: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<f64> {
    gtnb_nn::layers::uniform(rng, shape, bound)
}

/// Shifts every trainable value, so zero-initialized biases and heads also
/// carry gradient.
fn jitter(store: &mut ParameterStore<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.names().filter(|n| !store.is_frozen(n)).cloned().collect();
    for n in names {
        for v in store.get_mut(&n).expect("listed").data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
}

pub fn toy_gtn_config() -> GtnConfig {
    GtnConfig { channels: vec![2, 2, 3], embed_dim: 6, ..GtnConfig::default() }
}

pub fn toy_gpt_config() -> GptConfig {
    GptConfig { d_model: 8, heads: 2, blocks: 1, context: 2, temperature: 0.0 }
}

/// Genre loss over a 2-clip batch of different lengths.
pub fn genre_loss_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = GenreTokenNetwork::new(&toy_gtn_config());
    let mut store = ParameterStore::<f64>::new();
    net.init(&mut store, &mut rng)?;
    jitter(&mut store, &mut rng);
    let mels = [random(&mut rng, &[12, N_MELS], 3.0), random(&mut rng, &[9, N_MELS], 3.0)];
    let labels = [3usize, 7];
    Ok(grad_check_params(
        &store,
        |g| {
            let mut rows = Vec::new();
            for m in &mels {
                let x = g.constant(m.clone());
                rows.push(net.forward(g, x).map_err(to_nn)?.logits);
            }
            let logits = g.concat_rows(&rows)?;
            g.cross_entropy_logits(logits, &labels)
        },
        H,
    )?)
}

/// Full VQ-VAE objective for one half-body stream (16 frames).
///
/// The quantizer is piecewise constant, so the straight-through gradient is
/// checked against finite differences of its surrogate: the decoder input is
/// `z + c`, with `c = q − z`, the code assignment and every stop-gradient
/// operand fixed at the base point.
/// Analytic gradients come from [`vq_step`] itself.
pub fn vq_loss_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = VqConfig { codebook_size: 5, code_dim: 3, hidden: 4, ..VqConfig::default() };
    let beta = cfg.beta_commit;
    let vq = HalfVq::new(Half::Upper, &cfg);
    let mut store = ParameterStore::<f64>::new();
    vq.init(&mut store, &mut rng)?;
    jitter(&mut store, &mut rng);
    let x = random(&mut rng, &[2 * DOWNSAMPLE, Half::Upper.width()], 1.0);
    let latent = |s: &ParameterStore<f64>| -> Result<Tensor<f64>> {
        let mut g = Graph::with_store(s);
        let xv = g.constant(x.clone());
        let z = vq.encode(&mut g, xv)?;
        Ok(g.value(z).clone())
    };
    // Codebook rows near the actual latents, so every entry is in play.
    let z0 = latent(&store)?;
    let book: Vec<f64> = (0..cfg.codebook_size)
        .flat_map(|k| z0.row(k % z0.rows()).to_vec())
        .map(|v| v + rng.gen_range(-0.3..0.3))
        .collect();
    store.set(vq.codebook_name(), Tensor::new(vec![cfg.codebook_size, cfg.code_dim], book)?);

    let (analytic, codes) = {
        let mut g = Graph::with_store(&store);
        let xv = g.constant(x.clone());
        let step = vq_step(&mut g, &vq, xv, beta)?;
        (g.backward(step.loss)?.param_grads(), step.codes)
    };
    let (_, q0) = quantize(&z0, store.require(&vq.codebook_name())?)?;
    let offset = Tensor::new(z0.shape().to_vec(), q0.data().iter().zip(z0.data()).map(|(q, z)| q - z).collect())?;
    let surrogate = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::with_store(s);
        let xv = g.constant(x.clone());
        let xn = vq.normalize(&mut g, xv)?;
        let z = vq.encode_normalized(&mut g, xn)?;
        let book = g.param(&vq.codebook_name())?;
        let q = g.gather_rows(book, &codes)?;
        let c = g.constant(offset.clone());
        let zq = g.add(z, c)?;
        let rn = vq.decode_normalized(&mut g, zq)?;
        let rec = g.mse(xn, rn)?;
        let zd = g.constant(z0.clone());
        let qd = g.constant(q0.clone());
        let book_term = g.mse(zd, q)?;
        let commit = g.mse(z, qd)?;
        let commit = g.scale(commit, beta);
        let l = g.add(rec, book_term)?;
        let l = g.add(l, commit)?;
        Ok(g.value(l).data()[0])
    };

    let mut probe = store.clone();
    let mut worst = 0f64;
    let names: Vec<String> = store.names().filter(|n| !store.is_frozen(n)).cloned().collect();
    for name in names {
        for i in 0..store.require(&name)?.len() {
            let orig = probe.require(&name)?.data()[i];
            probe.get_mut(&name).expect("present").data_mut()[i] = orig + H;
            let up = surrogate(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[i] = orig - H;
            let down = surrogate(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * H);
            let ad = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            worst = worst.max((ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs()));
        }
    }
    Ok(worst)
}

/// Code-prediction loss with T′ = 2, codebook 4, d_model 8, including the
/// condition embeddings.
pub fn code_loss_error(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = toy_gpt_config();
    let net = CrossCondGpt::new(&cfg, 4);
    let mut store = ParameterStore::<f64>::new();
    net.init(&mut store, &mut rng)?;
    jitter(&mut store, &mut rng);
    let frames = 2 * DOWNSAMPLE;
    let music = random(&mut rng, &[frames, columns::WIDTH], 1.0);
    let energy = random(&mut rng, &[frames, 1], 1.0);
    let genre = random(&mut rng, &[1, cfg.d_model], 0.5);
    let codes = PoseCodeSequence { upper: vec![1, 3], lower: vec![2, 0], downsample_rate: DOWNSAMPLE };
    Ok(grad_check_params(
        &store,
        |g| {
            let (m, e, z) = (g.constant(music.clone()), g.constant(energy.clone()), g.constant(genre.clone()));
            let (ev, mv) = net.condition(g, m, e, z).map_err(to_nn)?;
            let (lu, ll) = net.forward(g, ev, mv, &codes.upper, &codes.lower).map_err(to_nn)?;
            gpt_loss_graph(g, lu, ll, &codes).map_err(to_nn)
        },
        H,
    )?)
}

/// `α·L_gtn + β·L_gpt` with the inferred genre embedding feeding the GPT, so
/// the genre network receives gradient from both terms.
pub fn combined_loss_error(seed: u64, alpha: f64, beta: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gcfg = GtnConfig { embed_dim: 8, ..toy_gtn_config() };
    let gtn = GenreTokenNetwork::new(&gcfg);
    let gpt = CrossCondGpt::new(&toy_gpt_config(), 4);
    let mut store = ParameterStore::<f64>::new();
    gtn.init(&mut store, &mut rng)?;
    gpt.init(&mut store, &mut rng)?;
    jitter(&mut store, &mut rng);
    let frames = 2 * DOWNSAMPLE;
    let mel = random(&mut rng, &[frames, N_MELS], 3.0);
    let music = random(&mut rng, &[frames, columns::WIDTH], 1.0);
    let energy = random(&mut rng, &[frames, 1], 1.0);
    let codes = PoseCodeSequence { upper: vec![0, 2], lower: vec![3, 1], downsample_rate: DOWNSAMPLE };
    Ok(grad_check_params(
        &store,
        |g| {
            let mv = g.constant(mel.clone());
            let out = gtn.forward(g, mv).map_err(to_nn)?;
            let l1 = g.cross_entropy_logits(out.logits, &[5])?;
            let (m, e) = (g.constant(music.clone()), g.constant(energy.clone()));
            let (ev, cm) = gpt.condition(g, m, e, out.embedding).map_err(to_nn)?;
            let (lu, ll) = gpt.forward(g, ev, cm, &codes.upper, &codes.lower).map_err(to_nn)?;
            let l2 = gpt_loss_graph(g, lu, ll, &codes).map_err(to_nn)?;
            let a = g.scale(l1, alpha);
            let b = g.scale(l2, beta);
            g.add(a, b)
        },
        H,
    )?)
}

/// All objectives, named.
pub fn objective_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    Ok(vec![
        ("genre loss", genre_loss_error(seed)?),
        ("vq-vae loss", vq_loss_error(seed)?),
        ("code loss", code_loss_error(seed)?),
        ("combined loss", combined_loss_error(seed, 1.0, 0.5)?),
    ])
}

fn to_nn(e: crate::Error) -> gtnb_nn::NnError {
    match e {
        crate::Error::Nn(inner) => inner,
        other => gtnb_nn::NnError::Invalid(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objectives_pass() {
        for (name, err) in objective_suite(0).unwrap() {
            assert!(err < 1e-5, "{name}: {err}");
        }
    }
}
