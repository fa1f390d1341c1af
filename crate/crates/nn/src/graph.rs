//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order. [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients into every node that transitively depends on a trainable leaf.
//! Matrix-shaped operations treat a tensor as `rows × cols`, where `cols` is
//! the last dimension.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{shape_err, NnError, Result};
use crate::kernels;
use crate::store::{Gradients, ParameterStore};
use crate::tensor::{gemm, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 1-D convolution over a `[time, channels]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub t_in: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dGeom {
    pub fn t_out(&self) -> usize {
        (self.t_in + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }

    pub fn t_out_transposed(&self) -> usize {
        ((self.t_in - 1) * self.stride + self.kernel).saturating_sub(2 * self.pad)
    }
}

/// Geometry of a 2-D convolution over a `[channels, height, width]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Conv2dGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.ph - self.kh) / self.sh + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pw - self.kw) / self.sw + 1
    }
}

enum Op<F> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, F),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Gather { table: Var, idx: Vec<usize> },
    Conv1d { x: Var, w: Var, geom: Conv1dGeom, cols: Vec<F> },
    ConvT1d { x: Var, w: Var, geom: Conv1dGeom },
    Conv2d { x: Var, w: Var, geom: Conv2dGeom, cols: Vec<F> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    AvgPoolRows { x: Var, factor: usize },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    StraightThrough(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    grad: bool,
}

/// Reverse-mode tape. Parameters are read from an optional [`ParameterStore`];
/// frozen parameters enter as constants.
pub struct Graph<'s, F: Real> {
    nodes: Vec<Node<F>>,
    store: Option<&'s ParameterStore<F>>,
    params: HashMap<String, Var>,
}

impl<F: Real> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, F: Real> Graph<'s, F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), store: None, params: HashMap::new() }
    }

    pub fn with_store(store: &'s ParameterStore<F>) -> Self {
        Self { nodes: Vec::new(), store: Some(store), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf holding `t`; differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        let grad = t.requires_grad();
        self.push(t, Op::Leaf, grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Non-differentiable copy of `x` (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Leaf for the named store parameter. Repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| NnError::Invalid("graph has no parameter store".into()))?;
        let t = store.require(name)?.clone();
        let grad = !store.is_frozen(name);
        let v = self.push(t, Op::Param, grad);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn binary_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let g = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let g = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let g = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), g))
    }

    /// Adds vector `row` (length = cols of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(row).len() != cols {
            return shape_err(format!(
                "add_row: row of {} values for {cols} columns",
                self.value(row).len()
            ));
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(cols.max(1)) {
            for (o, b) in chunk.iter_mut().zip(&r) {
                *o += *b;
            }
        }
        let g = self.needs(&[x, row]);
        Ok(self.push(out.with_requires_grad(false), Op::AddRow(x, row), g))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Var {
        let v = self.map(x, |a| scale * a + shift);
        let g = self.needs(&[x]);
        self.push(v, Op::Affine(x, scale), g)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        self.affine(x, s, F::zero())
    }

    /// `op(a) · op(b)` for rank-2 operands; `ta`/`tb` transpose the stored matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(format!("matmul needs rank-2 operands, got {sa:?} and {sb:?}"));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return shape_err(format!("matmul inner dims {ka} vs {kb} ({sa:?}, {sb:?})"));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(ta, tb, m, n, ka, F::one(), self.value(a).data(), self.value(b).data(), F::zero(), &mut out);
        let g = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, ta, tb, m, k: ka, n },
            g,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| if a > F::zero() { a } else { F::zero() });
        let g = self.needs(&[x]);
        self.push(v, Op::Relu(x), g)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.map(x, kernels::gelu);
        let g = self.needs(&[x]);
        self.push(v, Op::Gelu(x), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, kernels::sigmoid);
        let g = self.needs(&[x]);
        self.push(v, Op::Sigmoid(x), g)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.tanh());
        let g = self.needs(&[x]);
        self.push(v, Op::Tanh(x), g)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a * a);
        let g = self.needs(&[x]);
        self.push(v, Op::Square(x), g)
    }

    /// Row-wise softmax. With `mask`, entries where `mask[i] == false` get
    /// probability exactly zero and take no part in the normalization.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let t = self.value(x);
        if let Some(m) = &mask {
            if m.len() != t.len() {
                return shape_err("softmax mask length differs from input");
            }
        }
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(cols.max(1)).enumerate() {
            let keep = mask.as_ref().map(|m| &m[r * cols..(r + 1) * cols]);
            kernels::softmax_in_place(row, keep);
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        let g = self.needs(&[x]);
        Ok(self.push(v, Op::Softmax(x), g))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = mx + row.iter().map(|v| (*v - mx).exp()).sum::<F>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let g = self.needs(&[x]);
        self.push(v, Op::LogSoftmax(x), g)
    }

    /// Normalizes each row to zero mean / unit variance, then applies `gain`
    /// and `bias` (both of length cols).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return shape_err("layer_norm gain/bias width differs from input");
        }
        let rows = t.rows();
        let n = F::of(cols as f64);
        let mut xhat = vec![F::zero(); t.len()];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                xhat[r * cols + c] = (row[c] - mean) * rs;
            }
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<F> = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| *h * gv[i % cols] + bv[i % cols])
            .collect();
        let v = Tensor::new(t.shape().to_vec(), out)?;
        let g = self.needs(&[x, gain, bias]);
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, xhat, rstd }, g))
    }

    /// Rows `idx` of the rank-2 `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return shape_err("gather_rows needs a rank-2 table");
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(NnError::Invalid(format!("row index {i} out of range for {rows} rows")));
            }
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![idx.len(), cols], out)?;
        let g = self.needs(&[table]);
        Ok(self.push(v, Op::Gather { table, idx: idx.to_vec() }, g))
    }

    /// 1-D convolution. `x`: `[t_in, c_in]`; `w`: `[kernel, c_in, c_out]`.
    /// Output `[t_out, c_out]` (no bias).
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] || stride == 0 {
            return shape_err(format!("conv1d: input {sx:?}, weight {sw:?}"));
        }
        let geom = Conv1dGeom { t_in: sx[0], c_in: sx[1], c_out: sw[2], kernel: sw[0], stride, pad };
        if sx[0] + 2 * pad < sw[0] {
            return shape_err(format!("conv1d: input length {} shorter than kernel", sx[0]));
        }
        let t_out = geom.t_out();
        let cols = kernels::im2col_1d(self.value(x).data(), &geom);
        let kc = geom.kernel * geom.c_in;
        let mut out = vec![F::zero(); t_out * geom.c_out];
        gemm(false, false, t_out, geom.c_out, kc, F::one(), &cols, self.value(w).data(), F::zero(), &mut out);
        let g = self.needs(&[x, w]);
        Ok(self.push(Tensor::new(vec![t_out, geom.c_out], out)?, Op::Conv1d { x, w, geom, cols }, g))
    }

    /// Transposed 1-D convolution. `x`: `[t_in, c_in]`; `w`: `[c_in, kernel, c_out]`.
    /// Output length `(t_in - 1) * stride + kernel - 2 * pad` (no bias).
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[0] != sx[1] || stride == 0 || sx[0] == 0 {
            return shape_err(format!("conv_transpose1d: input {sx:?}, weight {sw:?}"));
        }
        let geom = Conv1dGeom { t_in: sx[0], c_in: sx[1], c_out: sw[2], kernel: sw[1], stride, pad };
        let t_out = geom.t_out_transposed();
        let kc = geom.kernel * geom.c_out;
        let mut z = vec![F::zero(); geom.t_in * kc];
        gemm(false, false, geom.t_in, kc, geom.c_in, F::one(), self.value(x).data(), self.value(w).data(), F::zero(), &mut z);
        let out = kernels::col2im_transposed_1d(&z, &geom);
        let g = self.needs(&[x, w]);
        Ok(self.push(Tensor::new(vec![t_out, geom.c_out], out)?, Op::ConvT1d { x, w, geom }, g))
    }

    /// 2-D convolution. `x`: `[c_in, h, w]`; `w`: `[c_out, c_in, kh, kw]`.
    /// Output `[c_out, h_out, w_out]` (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || stride.0 == 0 || stride.1 == 0 {
            return shape_err(format!("conv2d: input {sx:?}, weight {sw:?}"));
        }
        let geom = Conv2dGeom {
            c_in: sx[0],
            h: sx[1],
            w: sx[2],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
        };
        if geom.h + 2 * geom.ph < geom.kh || geom.w + 2 * geom.pw < geom.kw {
            return shape_err(format!("conv2d: input {sx:?} smaller than kernel"));
        }
        let (ho, wo) = (geom.h_out(), geom.w_out());
        let cols = kernels::im2col_2d(self.value(x).data(), &geom);
        let kk = geom.c_in * geom.kh * geom.kw;
        let mut out = vec![F::zero(); geom.c_out * ho * wo];
        gemm(false, false, geom.c_out, ho * wo, kk, F::one(), self.value(w).data(), &cols, F::zero(), &mut out);
        let g = self.needs(&[x, w]);
        Ok(self.push(Tensor::new(vec![geom.c_out, ho, wo], out)?, Op::Conv2d { x, w, geom, cols }, g))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[c, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        // Transposed view trick: [c, h*w] rows + per-row bias == transpose, add_row, transpose.
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        if self.value(bias).len() != c {
            return shape_err("channel bias length differs from channel count");
        }
        let flat = self.reshape(x, vec![c, self.value(x).len() / c.max(1)])?;
        let t = self.transpose(flat)?;
        let t = self.add_row(t, bias)?;
        let back = self.transpose(t)?;
        self.reshape(back, shape)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if start + len > cols {
            return shape_err(format!("slice_cols {start}+{len} beyond {cols} columns"));
        }
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let v = Tensor::new(vec![rows, len], out)?;
        let g = self.needs(&[x]);
        Ok(self.push(v, Op::SliceCols { x, start }, g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return shape_err("concat_cols: row counts differ");
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let v = Tensor::new(vec![rows, total], out)?;
        let g = self.needs(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return shape_err("concat_rows: column counts differ");
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let rows = out.len() / cols.max(1);
        let v = Tensor::new(vec![rows, cols], out)?;
        let g = self.needs(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), g))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if start + len > t.rows() {
            return shape_err(format!("slice_rows {start}+{len} beyond {} rows", t.rows()));
        }
        let v = Tensor::new(vec![len, cols], t.data()[start * cols..(start + len) * cols].to_vec())?;
        let g = self.needs(&[x]);
        Ok(self.push(v, Op::SliceRows { x, start }, g))
    }

    /// Averages consecutive groups of `factor` rows.
    pub fn avg_pool_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if factor == 0 || rows % factor != 0 {
            return shape_err(format!("avg_pool_rows: {rows} rows not divisible by {factor}"));
        }
        let inv = F::one() / F::of(factor as f64);
        let mut out = vec![F::zero(); rows / factor * cols];
        for r in 0..rows {
            let o = r / factor;
            for (acc, v) in out[o * cols..(o + 1) * cols].iter_mut().zip(t.row(r)) {
                *acc += *v;
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let v = Tensor::new(vec![rows / factor, cols], out)?;
        let g = self.needs(&[x]);
        Ok(self.push(v, Op::AvgPoolRows { x, factor }, g))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return shape_err("transpose needs rank 2");
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let v = Tensor::new(vec![c, r], kernels::transpose(t.data(), r, c))?;
        let g = self.needs(&[x]);
        Ok(self.push(v, Op::Transpose(x), g))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let g = self.needs(&[x]);
        Ok(self.push(v, Op::Reshape(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let g = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<F>() / F::of(t.len().max(1) as f64);
        let g = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), g)
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        if targets.len() != rows {
            return shape_err(format!("{} targets for {rows} rows", targets.len()));
        }
        let mut probs = t.data().to_vec();
        let mut loss = F::zero();
        for (r, row) in probs.chunks_mut(cols.max(1)).enumerate() {
            let tgt = targets[r];
            if tgt >= cols {
                return Err(NnError::Invalid(format!("target {tgt} out of range for {cols} classes")));
            }
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = mx + row.iter().map(|v| (*v - mx).exp()).sum::<F>().ln();
            loss += lse - row[tgt];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = loss / F::of(rows.max(1) as f64);
        let g = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            g,
        ))
    }

    /// Forward value of `quantized`, gradient routed unchanged to `x`.
    pub fn straight_through(&mut self, x: Var, quantized: Var) -> Result<Var> {
        self.binary_check(x, quantized, "straight_through")?;
        let v = self.value(quantized).clone();
        let g = self.needs(&[x]);
        Ok(self.push(v, Op::StraightThrough(x), g))
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward<F>> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        Ok(Backward { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(), params: self.param_vars() })
    }

    fn param_vars(&self) -> Vec<(String, Var)> {
        let mut v: Vec<_> = self.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        v.sort();
        v
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        // Gradient buffer of `v`, or None if it does not need one.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.len()]))
                } else {
                    None
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if let Some(ga) = buf!(*a) {
                    kernels::axpy(ga, F::one(), g);
                }
                if let Some(gb) = buf!(*b) {
                    kernels::axpy(gb, F::one(), g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = buf!(*a) {
                    kernels::axpy(ga, F::one(), g);
                }
                if let Some(gb) = buf!(*b) {
                    kernels::axpy(gb, -F::one(), g);
                }
            }
            Op::Mul(a, b) => {
                if nodes[a.0].grad {
                    let bv = val(*b).to_vec();
                    let ga = buf!(*a).unwrap();
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(&bv) {
                        *o += *gi * *y;
                    }
                }
                if nodes[b.0].grad {
                    let av = val(*a).to_vec();
                    let gb = buf!(*b).unwrap();
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(&av) {
                        *o += *gi * *x;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = buf!(*x) {
                    kernels::axpy(gx, F::one(), g);
                }
                let cols = nodes[row.0].value.len();
                if let Some(gr) = buf!(*row) {
                    for chunk in g.chunks(cols.max(1)) {
                        kernels::axpy(gr, F::one(), chunk);
                    }
                }
            }
            Op::Affine(x, s) => {
                if let Some(gx) = buf!(*x) {
                    kernels::axpy(gx, *s, g);
                }
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if nodes[a.0].grad {
                    let bv = val(*b);
                    let ga = grads[a.0].get_or_insert_with(|| vec![F::zero(); m * k]);
                    if *ta {
                        gemm(*tb, true, k, m, n, F::one(), bv, g, F::one(), ga);
                    } else {
                        gemm(false, !*tb, m, k, n, F::one(), g, bv, F::one(), ga);
                    }
                }
                if nodes[b.0].grad {
                    let av = val(*a);
                    let gb = grads[b.0].get_or_insert_with(|| vec![F::zero(); k * n]);
                    if *tb {
                        gemm(true, *ta, n, k, m, F::one(), g, av, F::one(), gb);
                    } else {
                        gemm(!*ta, false, k, n, m, F::one(), av, g, F::one(), gb);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                if let Some(gx) = buf!(*x) {
                    for ((o, gi), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > F::zero() {
                            *o += *gi;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                if let Some(gx) = buf!(*x) {
                    for ((o, gi), v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += *gi * kernels::gelu_grad(*v);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = nodes[i].value.data();
                if let Some(gx) = buf!(*x) {
                    for ((o, gi), y) in gx.iter_mut().zip(g).zip(yv) {
                        *o += *gi * *y * (F::one() - *y);
                    }
                }
            }
            Op::Tanh(x) => {
                let yv = nodes[i].value.data();
                if let Some(gx) = buf!(*x) {
                    for ((o, gi), y) in gx.iter_mut().zip(g).zip(yv) {
                        *o += *gi * (F::one() - *y * *y);
                    }
                }
            }
            Op::Square(x) => {
                let xv = val(*x);
                if let Some(gx) = buf!(*x) {
                    for ((o, gi), v) in gx.iter_mut().zip(g).zip(xv) {
                        *o += *gi * (*v + *v);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &nodes[i].value;
                let cols = y.cols().max(1);
                if let Some(gx) = buf!(*x) {
                    for ((o, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols)) {
                        let dot: F = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                        for ((oo, gg), yy) in o.iter_mut().zip(gr).zip(yr) {
                            *oo += *yy * (*gg - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = &nodes[i].value;
                let cols = y.cols().max(1);
                if let Some(gx) = buf!(*x) {
                    for ((o, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols)) {
                        let total: F = gr.iter().copied().sum();
                        for ((oo, gg), yy) in o.iter_mut().zip(gr).zip(yr) {
                            *oo += *gg - yy.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = nodes[gain.0].value.len();
                let gv = val(*gain);
                if let Some(gg) = buf!(*gain) {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((o, a), h) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += *a * *h;
                        }
                    }
                }
                if let Some(gb) = buf!(*bias) {
                    for gr in g.chunks(cols) {
                        kernels::axpy(gb, F::one(), gr);
                    }
                }
                if nodes[x.0].grad {
                    let gv = gv.to_vec();
                    let gx = buf!(*x).unwrap();
                    let n = F::of(cols as f64);
                    for (r, ((o, gr), hr)) in
                        gx.chunks_mut(cols).zip(g.chunks(cols)).zip(xhat.chunks(cols)).enumerate()
                    {
                        let dh: Vec<F> = gr.iter().zip(&gv).map(|(a, b)| *a * *b).collect();
                        let mean_dh = dh.iter().copied().sum::<F>() / n;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| *a * *b).sum::<F>() / n;
                        for ((oo, d), h) in o.iter_mut().zip(&dh).zip(hr) {
                            *oo += rstd[r] * (*d - mean_dh - *h * mean_dhh);
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                let cols = nodes[table.0].value.cols();
                if let Some(gt) = buf!(*table) {
                    for (r, &row) in idx.iter().enumerate() {
                        kernels::axpy(&mut gt[row * cols..(row + 1) * cols], F::one(), &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Conv1d { x, w, geom, cols } => {
                let t_out = geom.t_out();
                let kc = geom.kernel * geom.c_in;
                if nodes[w.0].grad {
                    let gw = grads[w.0].get_or_insert_with(|| vec![F::zero(); kc * geom.c_out]);
                    gemm(true, false, kc, geom.c_out, t_out, F::one(), cols, g, F::one(), gw);
                }
                if nodes[x.0].grad {
                    let mut dcols = vec![F::zero(); t_out * kc];
                    gemm(false, true, t_out, kc, geom.c_out, F::one(), g, val(*w), F::zero(), &mut dcols);
                    let gx = buf!(*x).unwrap();
                    kernels::col2im_1d(&dcols, geom, gx);
                }
            }
            Op::ConvT1d { x, w, geom } => {
                let kc = geom.kernel * geom.c_out;
                let dz = kernels::im2col_transposed_1d(g, geom);
                if nodes[w.0].grad {
                    let xv = val(*x);
                    let gw = grads[w.0].get_or_insert_with(|| vec![F::zero(); geom.c_in * kc]);
                    gemm(true, false, geom.c_in, kc, geom.t_in, F::one(), xv, &dz, F::one(), gw);
                }
                if nodes[x.0].grad {
                    let wv = val(*w);
                    let gx = grads[x.0].get_or_insert_with(|| vec![F::zero(); geom.t_in * geom.c_in]);
                    gemm(false, true, geom.t_in, geom.c_in, kc, F::one(), &dz, wv, F::one(), gx);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let hw = geom.h_out() * geom.w_out();
                let kk = geom.c_in * geom.kh * geom.kw;
                if nodes[w.0].grad {
                    let gw = grads[w.0].get_or_insert_with(|| vec![F::zero(); geom.c_out * kk]);
                    gemm(false, true, geom.c_out, kk, hw, F::one(), g, cols, F::one(), gw);
                }
                if nodes[x.0].grad {
                    let mut dcols = vec![F::zero(); kk * hw];
                    gemm(true, false, kk, hw, geom.c_out, F::one(), val(*w), g, F::zero(), &mut dcols);
                    let gx = buf!(*x).unwrap();
                    kernels::col2im_2d(&dcols, geom, gx);
                }
            }
            Op::SliceCols { x, start } => {
                let in_cols = nodes[x.0].value.cols();
                let len = nodes[i].value.cols();
                if let Some(gx) = buf!(*x) {
                    for (r, gr) in g.chunks(len.max(1)).enumerate() {
                        let off = r * in_cols + start;
                        kernels::axpy(&mut gx[off..off + len], F::one(), gr);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut off = 0;
                for p in parts {
                    let pc = nodes[p.0].value.cols();
                    if let Some(gp) = buf!(*p) {
                        for (r, gr) in gp.chunks_mut(pc.max(1)).enumerate() {
                            kernels::axpy(gr, F::one(), &g[r * total + off..r * total + off + pc]);
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(gp) = buf!(*p) {
                        kernels::axpy(gp, F::one(), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = nodes[x.0].value.cols();
                if let Some(gx) = buf!(*x) {
                    let off = start * cols;
                    kernels::axpy(&mut gx[off..off + g.len()], F::one(), g);
                }
            }
            Op::AvgPoolRows { x, factor } => {
                let cols = nodes[x.0].value.cols().max(1);
                let inv = F::one() / F::of(*factor as f64);
                if let Some(gx) = buf!(*x) {
                    for (r, gr) in gx.chunks_mut(cols).enumerate() {
                        let o = r / factor;
                        kernels::axpy(gr, inv, &g[o * cols..(o + 1) * cols]);
                    }
                }
            }
            Op::Transpose(x) => {
                let s = nodes[i].value.shape();
                let gt = kernels::transpose(g, s[0], s[1]);
                if let Some(gx) = buf!(*x) {
                    kernels::axpy(gx, F::one(), &gt);
                }
            }
            Op::Reshape(x) | Op::StraightThrough(x) => {
                if let Some(gx) = buf!(*x) {
                    kernels::axpy(gx, F::one(), g);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = buf!(*x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = F::of(nodes[x.0].value.len().max(1) as f64);
                if let Some(gx) = buf!(*x) {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = nodes[logits.0].value.cols().max(1);
                let scale = g[0] / F::of(targets.len().max(1) as f64);
                if let Some(gl) = buf!(*logits) {
                    for (r, (o, p)) in gl.chunks_mut(cols).zip(probs.chunks(cols)).enumerate() {
                        for (c, (oo, pp)) in o.iter_mut().zip(p).enumerate() {
                            let onehot = if c == targets[r] { F::one() } else { F::zero() };
                            *oo += scale * (*pp - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of [`Graph::backward`].
pub struct Backward<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl<F: Real> Backward<F> {
    /// Gradient with respect to `v`; `None` if no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<Tensor<F>> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every trainable parameter touched by the graph.
    pub fn param_grads(&self) -> Gradients<F> {
        let mut out = Gradients::new();
        for (name, v) in &self.params {
            if let Some(g) = self.wrt(*v) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
