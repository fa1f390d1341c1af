//! Non-differentiable helpers on plain vectors.

use crate::error::{shape_err, NnError, Result};

/// Floor applied to predicted probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return shape_err("softmax of an empty vector");
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(NnError::NumericDomain(format!("softmax input {bad} is not finite")));
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `-sum_i target_i * ln(max(pred_i, eps))`.
pub fn cross_entropy(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return shape_err(format!("cross_entropy: {} predictions vs {} targets", pred.len(), target.len()));
    }
    Ok(-pred
        .iter()
        .zip(target)
        .map(|(p, t)| if *t == 0.0 { 0.0 } else { t * p.max(PROB_EPS).ln() })
        .sum::<f64>())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(softmax(&[5.0; 4]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(NnError::NumericDomain(_))));
        assert!(matches!(softmax(&[f64::INFINITY]), Err(NnError::NumericDomain(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let onehot = [0.0, 1.0, 0.0];
        assert_eq!(cross_entropy(&onehot, &onehot).unwrap(), 0.0);
        let uniform = [0.1; 10];
        let mut t = [0.0; 10];
        t[4] = 1.0;
        assert!((cross_entropy(&uniform, &t).unwrap() - 2.302_585_092_994_046).abs() < 1e-12);
        assert!((cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 0.693_147_180_559_945_3).abs() < 1e-12);
        assert!(cross_entropy(&[0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let v = cross_entropy(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - (-PROB_EPS.ln())).abs() < 1e-9);
    }
}
