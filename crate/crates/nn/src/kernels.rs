//! Plain-slice kernels shared by the forward and backward passes.

use crate::graph::{Conv1dGeom, Conv2dGeom};
use crate::tensor::Real;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Softmax of `row` in place. Entries with `keep[i] == false` become 0.
pub fn softmax_in_place<F: Real>(row: &mut [F], keep: Option<&[bool]>) {
    let allowed = |i: usize| keep.map_or(true, |k| k[i]);
    let mut mx = F::neg_infinity();
    for (i, v) in row.iter().enumerate() {
        if allowed(i) && *v > mx {
            mx = *v;
        }
    }
    if mx == F::neg_infinity() {
        row.iter_mut().for_each(|v| *v = F::zero());
        return;
    }
    let mut total = F::zero();
    for (i, v) in row.iter_mut().enumerate() {
        if allowed(i) {
            *v = (*v - mx).exp();
            total += *v;
        } else {
            *v = F::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `y += a * x`
pub fn axpy<F: Real>(y: &mut [F], a: F, x: &[F]) {
    for (o, v) in y.iter_mut().zip(x) {
        *o += a * *v;
    }
}

pub fn transpose<F: Real>(data: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

pub fn im2col_1d<F: Real>(x: &[F], g: &Conv1dGeom) -> Vec<F> {
    let t_out = g.t_out();
    let kc = g.kernel * g.c_in;
    let mut cols = vec![F::zero(); t_out * kc];
    for t in 0..t_out {
        for k in 0..g.kernel {
            let src = (t * g.stride + k) as isize - g.pad as isize;
            if src < 0 || src as usize >= g.t_in {
                continue;
            }
            let s = src as usize * g.c_in;
            let d = t * kc + k * g.c_in;
            cols[d..d + g.c_in].copy_from_slice(&x[s..s + g.c_in]);
        }
    }
    cols
}

pub fn col2im_1d<F: Real>(dcols: &[F], g: &Conv1dGeom, dx: &mut [F]) {
    let t_out = g.t_out();
    let kc = g.kernel * g.c_in;
    for t in 0..t_out {
        for k in 0..g.kernel {
            let src = (t * g.stride + k) as isize - g.pad as isize;
            if src < 0 || src as usize >= g.t_in {
                continue;
            }
            let s = src as usize * g.c_in;
            let d = t * kc + k * g.c_in;
            axpy(&mut dx[s..s + g.c_in], F::one(), &dcols[d..d + g.c_in]);
        }
    }
}

/// Scatter-add of per-input-step kernel contributions `z: [t_in, kernel*c_out]`.
pub fn col2im_transposed_1d<F: Real>(z: &[F], g: &Conv1dGeom) -> Vec<F> {
    let t_out = g.t_out_transposed();
    let kc = g.kernel * g.c_out;
    let mut out = vec![F::zero(); t_out * g.c_out];
    for t in 0..g.t_in {
        for k in 0..g.kernel {
            let dst = (t * g.stride + k) as isize - g.pad as isize;
            if dst < 0 || dst as usize >= t_out {
                continue;
            }
            let d = dst as usize * g.c_out;
            let s = t * kc + k * g.c_out;
            axpy(&mut out[d..d + g.c_out], F::one(), &z[s..s + g.c_out]);
        }
    }
    out
}

pub fn im2col_transposed_1d<F: Real>(dout: &[F], g: &Conv1dGeom) -> Vec<F> {
    let t_out = g.t_out_transposed();
    let kc = g.kernel * g.c_out;
    let mut dz = vec![F::zero(); g.t_in * kc];
    for t in 0..g.t_in {
        for k in 0..g.kernel {
            let src = (t * g.stride + k) as isize - g.pad as isize;
            if src < 0 || src as usize >= t_out {
                continue;
            }
            let s = src as usize * g.c_out;
            let d = t * kc + k * g.c_out;
            dz[d..d + g.c_out].copy_from_slice(&dout[s..s + g.c_out]);
        }
    }
    dz
}

pub fn im2col_2d<F: Real>(x: &[F], g: &Conv2dGeom) -> Vec<F> {
    let (ho, wo) = (g.h_out(), g.w_out());
    let hw = ho * wo;
    let mut cols = vec![F::zero(); g.c_in * g.kh * g.kw * hw];
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * hw;
                for oy in 0..ho {
                    let y = (oy * g.sh + i) as isize - g.ph as isize;
                    if y < 0 || y as usize >= g.h {
                        continue;
                    }
                    let base = (c * g.h + y as usize) * g.w;
                    for ox in 0..wo {
                        let x_ = (ox * g.sw + j) as isize - g.pw as isize;
                        if x_ >= 0 && (x_ as usize) < g.w {
                            cols[row + oy * wo + ox] = x[base + x_ as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im_2d<F: Real>(dcols: &[F], g: &Conv2dGeom, dx: &mut [F]) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let hw = ho * wo;
    for c in 0..g.c_in {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * hw;
                for oy in 0..ho {
                    let y = (oy * g.sh + i) as isize - g.ph as isize;
                    if y < 0 || y as usize >= g.h {
                        continue;
                    }
                    let base = (c * g.h + y as usize) * g.w;
                    for ox in 0..wo {
                        let x_ = (ox * g.sw + j) as isize - g.pw as isize;
                        if x_ >= 0 && (x_ as usize) < g.w {
                            dx[base + x_ as usize] += dcols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
