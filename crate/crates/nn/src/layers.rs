//! Parameterized building blocks. Each layer owns a name prefix; its tensors
//! live in a [`ParameterStore`] under `<prefix>.<param>`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::store::ParameterStore;
use crate::tensor::{Real, Tensor};

/// Tensor with entries drawn uniformly from `[-bound, bound]`.
pub fn uniform<F: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self { name: name.into(), in_dim, out_dim }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<F>, rng: &mut R) -> Result<()> {
        store.insert(self.weight_name(), uniform(rng, &[self.in_dim, self.out_dim], fan_in_bound(self.in_dim)))?;
        store.insert(self.bias_name(), Tensor::zeros(&[self.out_dim]))
    }

    pub fn init_zero<F: Real>(&self, store: &mut ParameterStore<F>) -> Result<()> {
        store.insert(self.weight_name(), Tensor::zeros(&[self.in_dim, self.out_dim]))?;
        store.insert(self.bias_name(), Tensor::zeros(&[self.out_dim]))
    }

    /// `x: [n, in_dim]` → `[n, out_dim]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name())?;
        let b = g.param(&self.bias_name())?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { name: name.into(), c_in, c_out, kernel, stride, pad }
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<F>, rng: &mut R) -> Result<()> {
        let bound = fan_in_bound(self.c_in * self.kernel);
        store.insert(format!("{}.w", self.name), uniform(rng, &[self.kernel, self.c_in, self.c_out], bound))?;
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.c_out]))
    }

    /// `x: [t, c_in]` → `[t_out, c_out]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.w", self.name))?;
        let b = g.param(&format!("{}.b", self.name))?;
        let y = g.conv1d(x, w, self.stride, self.pad)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { name: name.into(), c_in, c_out, kernel, stride, pad }
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<F>, rng: &mut R) -> Result<()> {
        // Each output step receives kernel/stride taps per input channel.
        let bound = fan_in_bound(self.c_in * (self.kernel / self.stride).max(1));
        store.insert(format!("{}.w", self.name), uniform(rng, &[self.c_in, self.kernel, self.c_out], bound))?;
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.c_out]))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.w", self.name))?;
        let b = g.param(&format!("{}.b", self.name))?;
        let y = g.conv_transpose1d(x, w, self.stride, self.pad)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        Self { name: name.into(), c_in, c_out, kernel, stride, pad }
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<F>, rng: &mut R) -> Result<()> {
        let bound = fan_in_bound(self.c_in * self.kernel.0 * self.kernel.1);
        store.insert(
            format!("{}.w", self.name),
            uniform(rng, &[self.c_out, self.c_in, self.kernel.0, self.kernel.1], bound),
        )?;
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.c_out]))
    }

    /// `x: [c_in, h, w]` → `[c_out, h_out, w_out]`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.w", self.name))?;
        let b = g.param(&format!("{}.b", self.name))?;
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        g.add_channel_bias(y, b)
    }
}

/// Gated recurrent unit with gate order (reset, update, candidate).
#[derive(Clone, Debug)]
pub struct Gru {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self { name: name.into(), input, hidden }
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<F>, rng: &mut R) -> Result<()> {
        let bound = fan_in_bound(self.hidden);
        let h3 = 3 * self.hidden;
        store.insert(format!("{}.w_ih", self.name), uniform(rng, &[self.input, h3], bound))?;
        store.insert(format!("{}.w_hh", self.name), uniform(rng, &[self.hidden, h3], bound))?;
        store.insert(format!("{}.b_ih", self.name), Tensor::zeros(&[h3]))?;
        store.insert(format!("{}.b_hh", self.name), Tensor::zeros(&[h3]))
    }

    /// Runs over `xs: [t, input]` from a zero state; returns the final `[1, hidden]` state.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, xs: Var) -> Result<Var> {
        let shape = g.shape(xs).to_vec();
        if shape.len() != 2 || shape[1] != self.input || shape[0] == 0 {
            return shape_err(format!("gru `{}` expects [t>0, {}], got {shape:?}", self.name, self.input));
        }
        let hdim = self.hidden;
        let w_ih = g.param(&format!("{}.w_ih", self.name))?;
        let w_hh = g.param(&format!("{}.w_hh", self.name))?;
        let b_ih = g.param(&format!("{}.b_ih", self.name))?;
        let b_hh = g.param(&format!("{}.b_hh", self.name))?;
        let gi_all = g.matmul(xs, w_ih)?;
        let gi_all = g.add_row(gi_all, b_ih)?;
        let mut h = g.constant(Tensor::zeros(&[1, hdim]));
        for t in 0..shape[0] {
            let gi = g.slice_rows(gi_all, t, 1)?;
            let gh = g.matmul(h, w_hh)?;
            let gh = g.add_row(gh, b_hh)?;
            let (gi_r, gh_r) = (g.slice_cols(gi, 0, hdim)?, g.slice_cols(gh, 0, hdim)?);
            let (gi_z, gh_z) = (g.slice_cols(gi, hdim, hdim)?, g.slice_cols(gh, hdim, hdim)?);
            let (gi_n, gh_n) = (g.slice_cols(gi, 2 * hdim, hdim)?, g.slice_cols(gh, 2 * hdim, hdim)?);
            let r = g.add(gi_r, gh_r)?;
            let r = g.sigmoid(r);
            let z = g.add(gi_z, gh_z)?;
            let z = g.sigmoid(z);
            let rn = g.mul(r, gh_n)?;
            let n = g.add(gi_n, rn)?;
            let n = g.tanh(n);
            // h' = n + z * (h - n)
            let d = g.sub(h, n)?;
            let zd = g.mul(z, d)?;
            h = g.add(n, zd)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim, eps: 1e-5 }
    }

    pub fn init<F: Real>(&self, store: &mut ParameterStore<F>) -> Result<()> {
        store.insert(format!("{}.gain", self.name), Tensor::filled(&[self.dim], F::one()))?;
        store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.dim]))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gain = g.param(&format!("{}.gain", self.name))?;
        let bias = g.param(&format!("{}.bias", self.name))?;
        g.layer_norm(x, gain, bias, F::of(self.eps))
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub name: String,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, count: usize, dim: usize) -> Self {
        Self { name: name.into(), count, dim }
    }

    pub fn table_name(&self) -> String {
        format!("{}.table", self.name)
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<F>, rng: &mut R) -> Result<()> {
        store.insert(self.table_name(), uniform(rng, &[self.count, self.dim], fan_in_bound(self.dim)))
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, ids: &[usize]) -> Result<Var> {
        let t = g.param(&self.table_name())?;
        g.gather_rows(t, ids)
    }
}

/// Multi-head scaled dot-product self-attention over `[n, d_model]`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub d_model: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, d_model: usize, heads: usize) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model must split evenly across heads");
        Self { name: name.into(), d_model, heads }
    }

    fn qkv(&self) -> Linear {
        Linear::new(format!("{}.qkv", self.name), self.d_model, 3 * self.d_model)
    }

    fn out(&self) -> Linear {
        Linear::new(format!("{}.out", self.name), self.d_model, self.d_model)
    }

    pub fn init<F: Real, R: Rng + ?Sized>(&self, store: &mut ParameterStore<F>, rng: &mut R) -> Result<()> {
        self.qkv().init(store, rng)?;
        self.out().init(store, rng)
    }

    /// `mask[i * n + j]` allows position `i` to attend to `j`.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let d = self.d_model;
        let dh = d / self.heads;
        let qkv = self.qkv().forward(g, x)?;
        let scale = F::one() / F::of(dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * dh, dh)?;
            let k = g.slice_cols(qkv, d + h * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + h * dh, dh)?;
            let s = g.matmul_t(q, k, false, true)?;
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s, mask.clone())?;
            heads.push(g.matmul(p, v)?);
        }
        let cat = g.concat_cols(&heads)?;
        self.out().forward(g, cat)
    }
}
