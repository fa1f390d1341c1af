//! Finite-difference checks for every layer kind at toy sizes (64-bit).

use std::sync::Arc;

use gtnb_nn::layers::{Conv1d, Conv2d, ConvTranspose1d, Embedding, Gru, LayerNorm, Linear, MultiHeadAttention};
use gtnb_nn::{grad_check, grad_check_params, Graph, ParameterStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;
const H: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
    gtnb_nn::layers::uniform(&mut rng(seed), shape, 1.0)
}

/// Random non-zero weights also for biases / norms, so every path is exercised.
fn jitter(store: &mut ParameterStore<f64>, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        for v in t.data_mut() {
            *v += rand::Rng::gen_range(&mut r, -0.3..0.3);
        }
    }
}

/// Loss that weights every output element differently.
fn weighted_sum(g: &mut Graph<'_, f64>, y: gtnb_nn::Var, seed: u64) -> gtnb_nn::Result<gtnb_nn::Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(random_tensor(seed, &shape));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn dense_layer() {
    let mut s = ParameterStore::new();
    let lin = Linear::new("lin", 4, 3);
    lin.init(&mut s, &mut rng(1)).unwrap();
    jitter(&mut s, 2);
    let x = random_tensor(3, &[2, 4]);
    let err = grad_check_params(&s, |g| {
        let xi = g.constant(x.clone());
        let y = lin.forward(g, xi)?;
        weighted_sum(g, y, 4)
    }, H).unwrap();
    assert!(err < TOL, "params {err}");
    let err = grad_check(|g, xi| {
        let w = g.constant(s.get("lin.w").unwrap().clone());
        let y = g.matmul(xi, w)?;
        weighted_sum(g, y, 4)
    }, &x, H).unwrap();
    assert!(err < TOL, "input {err}");
}

#[test]
fn conv1d_layer() {
    let mut s = ParameterStore::new();
    let conv = Conv1d::new("c", 3, 4, 4, 2, 1);
    conv.init(&mut s, &mut rng(5)).unwrap();
    jitter(&mut s, 6);
    let x = random_tensor(7, &[8, 3]);
    let err = grad_check_params(&s, |g| {
        let xi = g.constant(x.clone());
        let y = conv.forward(g, xi)?;
        weighted_sum(g, y, 8)
    }, H).unwrap();
    assert!(err < TOL, "params {err}");
    let w = s.get("c.w").unwrap().clone();
    let err = grad_check(|g, xi| {
        let wi = g.constant(w.clone());
        let y = g.conv1d(xi, wi, 2, 1)?;
        weighted_sum(g, y, 8)
    }, &x, H).unwrap();
    assert!(err < TOL, "input {err}");
}

#[test]
fn conv_transpose1d_layer() {
    let mut s = ParameterStore::new();
    let conv = ConvTranspose1d::new("t", 3, 2, 4, 2, 1);
    conv.init(&mut s, &mut rng(9)).unwrap();
    jitter(&mut s, 10);
    let x = random_tensor(11, &[4, 3]);
    let err = grad_check_params(&s, |g| {
        let xi = g.constant(x.clone());
        let y = conv.forward(g, xi)?;
        assert_eq!(g.shape(y), &[8, 2]);
        weighted_sum(g, y, 12)
    }, H).unwrap();
    assert!(err < TOL, "params {err}");
    let w = s.get("t.w").unwrap().clone();
    let err = grad_check(|g, xi| {
        let wi = g.constant(w.clone());
        let y = g.conv_transpose1d(xi, wi, 2, 1)?;
        weighted_sum(g, y, 12)
    }, &x, H).unwrap();
    assert!(err < TOL, "input {err}");
}

#[test]
fn conv2d_layer() {
    let mut s = ParameterStore::new();
    let conv = Conv2d::new("c2", 2, 3, (3, 3), (2, 2), (1, 1));
    conv.init(&mut s, &mut rng(13)).unwrap();
    jitter(&mut s, 14);
    let x = random_tensor(15, &[2, 5, 6]);
    let err = grad_check_params(&s, |g| {
        let xi = g.constant(x.clone());
        let y = conv.forward(g, xi)?;
        assert_eq!(g.shape(y), &[3, 3, 3]);
        weighted_sum(g, y, 16)
    }, H).unwrap();
    assert!(err < TOL, "params {err}");
    let w = s.get("c2.w").unwrap().clone();
    let err = grad_check(|g, xi| {
        let wi = g.constant(w.clone());
        let y = g.conv2d(xi, wi, (2, 2), (1, 1))?;
        weighted_sum(g, y, 16)
    }, &x, H).unwrap();
    assert!(err < TOL, "input {err}");
}

#[test]
fn gru_layer() {
    let mut s = ParameterStore::new();
    let gru = Gru::new("gru", 3, 4);
    gru.init(&mut s, &mut rng(17)).unwrap();
    jitter(&mut s, 18);
    let x = random_tensor(19, &[5, 3]);
    let err = grad_check_params(&s, |g| {
        let xi = g.constant(x.clone());
        let h = gru.forward(g, xi)?;
        weighted_sum(g, h, 20)
    }, H).unwrap();
    assert!(err < TOL, "params {err}");
}

#[test]
fn gru_input_gradient() {
    let mut s = ParameterStore::new();
    let gru = Gru::new("gru", 3, 4);
    gru.init(&mut s, &mut rng(21)).unwrap();
    jitter(&mut s, 22);
    // Treat the input as a parameter so grad_check_params perturbs it too.
    s.insert("x", random_tensor(23, &[5, 3])).unwrap();
    let err = grad_check_params(&s, |g| {
        let xi = g.param("x")?;
        let h = gru.forward(g, xi)?;
        weighted_sum(g, h, 24)
    }, H).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn layer_norm_layer() {
    let mut s = ParameterStore::new();
    let ln = LayerNorm::new("ln", 6);
    ln.init(&mut s).unwrap();
    jitter(&mut s, 25);
    s.insert("x", random_tensor(26, &[3, 6])).unwrap();
    let err = grad_check_params(&s, |g| {
        let xi = g.param("x")?;
        let y = ln.forward(g, xi)?;
        weighted_sum(g, y, 27)
    }, H).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn embedding_layer() {
    let mut s = ParameterStore::new();
    let emb = Embedding::new("emb", 5, 4);
    emb.init(&mut s, &mut rng(28)).unwrap();
    let err = grad_check_params(&s, |g| {
        let y = emb.forward(g, &[3, 0, 3, 4])?;
        weighted_sum(g, y, 29)
    }, H).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn attention_layer_with_mask() {
    let mut s = ParameterStore::new();
    let att = MultiHeadAttention::new("att", 8, 2);
    att.init(&mut s, &mut rng(30)).unwrap();
    jitter(&mut s, 31);
    s.insert("x", random_tensor(32, &[4, 8])).unwrap();
    let mask: Vec<bool> = (0..16).map(|k| k % 4 <= k / 4).collect();
    let mask = Arc::new(mask);
    let err = grad_check_params(&s, |g| {
        let xi = g.param("x")?;
        let y = att.forward(g, xi, Some(mask.clone()))?;
        weighted_sum(g, y, 33)
    }, H).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn two_layer_net_with_attention() {
    let mut s = ParameterStore::new();
    let l1 = Linear::new("l1", 6, 8);
    let att = MultiHeadAttention::new("att", 8, 2);
    let l2 = Linear::new("l2", 8, 5);
    let mut r = rng(34);
    l1.init(&mut s, &mut r).unwrap();
    att.init(&mut s, &mut r).unwrap();
    l2.init(&mut s, &mut r).unwrap();
    jitter(&mut s, 35);
    let x = random_tensor(36, &[3, 6]);
    let err = grad_check_params(&s, |g| {
        let xi = g.constant(x.clone());
        let h = l1.forward(g, xi)?;
        let h = g.gelu(h);
        let h = att.forward(g, h, None)?;
        let y = l2.forward(g, h)?;
        g.cross_entropy_logits(y, &[1, 4, 0])
    }, H).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn elementwise_and_reshaping_ops() {
    let x = random_tensor(37, &[4, 6]);
    let err = grad_check(|g, xi| {
        let a = g.relu(xi);
        let b = g.tanh(xi);
        let c = g.sigmoid(xi);
        let d = g.mul(a, b)?;
        let e = g.add(d, c)?;
        let f = g.log_softmax_rows(e);
        let p = g.softmax_rows(xi, None)?;
        let q = g.avg_pool_rows(p, 2)?;
        let t = g.transpose(q)?;
        let s1 = g.slice_cols(f, 1, 3)?;
        let s2 = g.slice_rows(s1, 1, 2)?;
        let c2 = g.concat_rows(&[s2, s2])?;
        let c3 = g.concat_cols(&[c2, c2])?;
        let l1 = weighted_sum(g, c3, 38)?;
        let l2 = weighted_sum(g, t, 39)?;
        let m = g.mean(f);
        let tot = g.add(l1, l2)?;
        g.add(tot, m)
    }, &x, H).unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn straight_through_copies_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![1, 2], vec![0.9, 0.8]).unwrap().with_requires_grad(true));
    let q = g.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
    let st = g.straight_through(x, q).unwrap();
    assert_eq!(g.value(st).data(), &[1.0, 1.0]);
    let w = g.constant(Tensor::new(vec![1, 2], vec![3.0, -2.0]).unwrap());
    let y = g.mul(st, w).unwrap();
    let loss = g.sum(y);
    let back = g.backward(loss).unwrap();
    // Downstream gradient w.r.t. the quantized value equals that w.r.t. the latent.
    assert_eq!(back.wrt(x).unwrap().data(), &[3.0, -2.0]);
    assert_eq!(back.wrt(st).unwrap().data(), &[3.0, -2.0]);
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut s = ParameterStore::<f64>::new();
    Linear::new("a", 2, 2).init(&mut s, &mut rng(40)).unwrap();
    Linear::new("b", 2, 2).init(&mut s, &mut rng(41)).unwrap();
    s.freeze("a");
    let mut g = Graph::with_store(&s);
    let x = g.constant(random_tensor(42, &[1, 2]));
    let h = Linear::new("a", 2, 2).forward(&mut g, x).unwrap();
    let y = Linear::new("b", 2, 2).forward(&mut g, h).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l).unwrap().param_grads();
    assert!(grads.get("a.w").is_none());
    assert!(grads.get("b.w").is_some());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(logits in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
        let p = gtnb_nn::functional::softmax(&logits).unwrap();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|v| *v >= 0.0 && *v <= 1.0));
    }

    #[test]
    fn softmax_shift_invariant(logits in proptest::collection::vec(-20.0f64..20.0, 1..12), c in -10.0f64..10.0) {
        let a = gtnb_nn::functional::softmax(&logits).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let b = gtnb_nn::functional::softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
