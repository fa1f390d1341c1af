use std::collections::BTreeMap;

use crate::error::{NnError, Result};
use crate::store::{Gradients, ParameterStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive-moment optimizer state: per-parameter first and second moments
/// and the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor<F>>,
    second: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> impl Iterator<Item = (&String, &Tensor<F>, &Tensor<F>)> {
        self.first.iter().map(move |(k, m)| (k, m, &self.second[k]))
    }

    /// Rebuilds a state from saved moments.
    pub fn restore(
        config: AdamConfig,
        step: u64,
        moments: impl IntoIterator<Item = (String, Tensor<F>, Tensor<F>)>,
    ) -> Result<Self> {
        let mut s = Self::new(config);
        s.step = step;
        for (name, m, v) in moments {
            if m.shape() != v.shape() {
                return Err(NnError::Shape(format!("moment shapes differ for `{name}`")));
            }
            s.first.insert(name.clone(), m);
            s.second.insert(name, v);
        }
        Ok(s)
    }
}

/// One bias-corrected adaptive-moment update of every non-frozen parameter
/// that has a gradient. Nothing is modified if any gradient is malformed.
pub fn adam_step<F: Real>(
    params: &mut ParameterStore<F>,
    grads: &Gradients<F>,
    state: &mut OptimizerState<F>,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = params.require(name)?;
        if p.shape() != g.shape() {
            return Err(NnError::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(NnError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as f64;
    let bc1 = 1.0 - c.beta1.powf(t);
    let bc2 = 1.0 - c.beta2.powf(t);
    let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
    let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
    let (lr, eps) = (F::of(c.lr), F::of(c.eps));
    let (inv_bc1, inv_bc2) = (F::of(1.0 / bc1), F::of(1.0 / bc2));
    for (name, g) in grads.iter() {
        if params.is_frozen(name) {
            continue;
        }
        let m = state.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let p = params.get_mut(name).expect("validated above");
        for (((pv, gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = b1 * *mv + one_b1 * *gv;
            *vv = b2 * *vv + one_b2 * *gv * *gv;
            let m_hat = *mv * inv_bc1;
            let v_hat = *vv * inv_bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
