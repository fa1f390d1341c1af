//! Central finite-difference verification of backpropagated gradients.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::store::ParameterStore;
use crate::tensor::{Real, Tensor};

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs())
}

fn scalar_of(g: &Graph<'_, f64>, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return shape_err(format!("grad_check needs a scalar function, got shape {:?}", v.shape()));
    }
    Ok(v.data()[0])
}

/// Max over coordinates of `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` for the
/// gradient of `f` with respect to its input at `point`.
pub fn grad_check<Fun>(f: Fun, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p.clone());
        let out = f(&mut g, x)?;
        scalar_of(&g, out)
    };
    let mut g = Graph::new();
    let x = g.input(point.clone().with_requires_grad(true));
    let out = f(&mut g, x)?;
    scalar_of(&g, out)?;
    let back = g.backward(out)?;
    let ad = back.wrt(x).unwrap_or_else(|| Tensor::zeros(point.shape()));
    let mut worst = 0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(rel_err(ad.data()[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// Same measure, taken over every trainable coordinate of `store`.
pub fn grad_check_params<Fun>(store: &ParameterStore<f64>, f: Fun, h: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::with_store(store);
    let out = f(&mut g)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?.param_grads();
    let mut probe = store.clone();
    let mut worst = 0f64;
    let names: Vec<String> = store.names().filter(|n| !store.is_frozen(n)).cloned().collect();
    for name in names {
        let n = store.get(&name).map_or(0, Tensor::len);
        for i in 0..n {
            let orig = probe.get(&name).unwrap().data()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                probe.get_mut(&name).unwrap().data_mut()[i] = v;
                let mut g = Graph::with_store(&probe);
                let out = f(&mut g)?;
                scalar_of(&g, out)
            };
            let up = eval_at(orig + h)?;
            let down = eval_at(orig - h)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let ad = grads.get(&name).map_or(0.0, |t| t.data()[i]);
            worst = worst.max(rel_err(ad, (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

fn jittered<Fun>(seed: u64, init: Fun) -> Result<ParameterStore<f64>>
where
    Fun: FnOnce(&mut ParameterStore<f64>, &mut StdRng) -> Result<()>,
{
    let mut rng = StdRng::seed_from_u64(seed);
    let mut s = ParameterStore::new();
    init(&mut s, &mut rng)?;
    // Non-zero biases and off-unit gains so every path carries gradient.
    let names: Vec<String> = s.names().cloned().collect();
    for n in names {
        for v in s.get_mut(&n).expect("listed").data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    Ok(s)
}

fn random(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    crate::layers::uniform(rng, shape, 1.0)
}

/// Scalar that weights every element of `y` differently.
fn weighted<F: Real>(g: &mut Graph<'_, F>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(crate::layers::uniform(&mut StdRng::seed_from_u64(seed), &shape, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Finite-difference error for each layer kind at toy sizes, inputs included
/// as perturbed coordinates. Step `h` = 1e-6.
pub fn layer_suite() -> Result<Vec<(&'static str, f64)>> {
    use crate::layers::{Conv1d, Conv2d, ConvTranspose1d, Embedding, Gru, LayerNorm, Linear, MultiHeadAttention};
    const H: f64 = 1e-6;
    let mut out = Vec::new();
    let with_input = |seed: u64, shape: &[usize], s: &mut ParameterStore<f64>| -> Result<()> {
        let x = random(&mut StdRng::seed_from_u64(seed), shape);
        s.insert("x", x)
    };

    let lin = Linear::new("lin", 4, 3);
    let mut s = jittered(1, |s, r| lin.init(s, r))?;
    with_input(2, &[2, 4], &mut s)?;
    out.push(("linear", grad_check_params(&s, |g| { let x = g.param("x")?; let y = lin.forward(g, x)?; weighted(g, y, 3) }, H)?));

    let c1 = Conv1d::new("c1", 3, 4, 4, 2, 1);
    let mut s = jittered(4, |s, r| c1.init(s, r))?;
    with_input(5, &[8, 3], &mut s)?;
    out.push(("conv1d", grad_check_params(&s, |g| { let x = g.param("x")?; let y = c1.forward(g, x)?; weighted(g, y, 6) }, H)?));

    let ct = ConvTranspose1d::new("ct", 3, 2, 4, 2, 1);
    let mut s = jittered(7, |s, r| ct.init(s, r))?;
    with_input(8, &[4, 3], &mut s)?;
    out.push(("conv_transpose1d", grad_check_params(&s, |g| { let x = g.param("x")?; let y = ct.forward(g, x)?; weighted(g, y, 9) }, H)?));

    let c2 = Conv2d::new("c2", 2, 3, (3, 3), (2, 2), (1, 1));
    let mut s = jittered(10, |s, r| c2.init(s, r))?;
    with_input(11, &[2, 5, 6], &mut s)?;
    out.push(("conv2d", grad_check_params(&s, |g| { let x = g.param("x")?; let y = c2.forward(g, x)?; weighted(g, y, 12) }, H)?));

    let gru = Gru::new("gru", 3, 4);
    let mut s = jittered(13, |s, r| gru.init(s, r))?;
    with_input(14, &[5, 3], &mut s)?;
    out.push(("gru", grad_check_params(&s, |g| { let x = g.param("x")?; let y = gru.forward(g, x)?; weighted(g, y, 15) }, H)?));

    let ln = LayerNorm::new("ln", 6);
    let mut s = jittered(16, |s, _| ln.init(s))?;
    with_input(17, &[3, 6], &mut s)?;
    out.push(("layer_norm", grad_check_params(&s, |g| { let x = g.param("x")?; let y = ln.forward(g, x)?; weighted(g, y, 18) }, H)?));

    let emb = Embedding::new("emb", 5, 4);
    let s = jittered(19, |s, r| emb.init(s, r))?;
    out.push(("embedding", grad_check_params(&s, |g| { let y = emb.forward(g, &[3, 0, 3, 4])?; weighted(g, y, 20) }, H)?));

    let att = MultiHeadAttention::new("att", 8, 2);
    let mut s = jittered(21, |s, r| att.init(s, r))?;
    with_input(22, &[4, 8], &mut s)?;
    let mask: std::sync::Arc<Vec<bool>> = std::sync::Arc::new((0..16).map(|k| k % 4 <= k / 4).collect());
    out.push((
        "attention",
        grad_check_params(&s, |g| { let x = g.param("x")?; let y = att.forward(g, x, Some(mask.clone()))?; weighted(g, y, 23) }, H)?,
    ));

    let x = random(&mut StdRng::seed_from_u64(24), &[3, 4]);
    out.push((
        "cross_entropy",
        grad_check(|g, x| g.cross_entropy_logits(x, &[1, 3, 0]), &x, H)?,
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::new(vec![3], vec![0.1, -2.0, 5.0]).unwrap();
        let err = grad_check(|g, _x| Ok(g.constant(Tensor::scalar(4.0))), &p, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn square_at_three() {
        let p = Tensor::scalar(3.0);
        let err = grad_check(|g, x| { let s = g.square(x); Ok(g.sum(s)) }, &p, 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn every_layer_kind_passes() {
        for (name, err) in layer_suite().unwrap() {
            assert!(err < 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn non_scalar_output_rejected() {
        let p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|_g, x| Ok(x), &p, 1e-5).is_err());
    }
}
