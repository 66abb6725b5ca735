use std::collections::BTreeMap;

use super::{AutodiffError, ParamSet, Result};

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected ADAM update of every parameter in `params`.
///
/// Gradients are read from the tensors and left in place. All gradients are
/// validated before anything is modified.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    for (name, p) in params.iter() {
        if p.grad().is_none() {
            return Err(AutodiffError::MissingGrad(name.clone()));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let n = p.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            return Err(AutodiffError::Shape(format!(
                "moment buffers for `{name}` do not match its {n} values"
            )));
        }
        let g = p.grad().expect("checked above").to_vec();
        for (((w, gi), mi), vi) in p.values_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn one_param(value: f64, grad: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(value));
        p.get_mut("w").unwrap().set_grad(vec![grad]).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one_param(1.5, 0.0);
        let mut s = AdamState::default();
        adam_step(&mut p, &mut s, 1e-3).unwrap();
        assert_eq!(p.get("w").unwrap().values(), &[1.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε) ≈ lr·sign(g).
        for g in [0.3, -7.0] {
            let mut p = one_param(0.0, g);
            let mut s = AdamState::default();
            adam_step(&mut p, &mut s, 1e-4).unwrap();
            let w = p.get("w").unwrap().values()[0];
            let expect = -1e-4 * g / (g.abs() + 1e-8);
            assert!((w - expect).abs() < 1e-18);
            assert!((w.abs() - 1e-4).abs() < 1e-11);
        }
    }

    #[test]
    fn two_steps_match_reference() {
        // Hand-rolled reference with the textbook recursion.
        let (lr, b1, b2, eps, g) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64, 0.25f64);
        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = one_param(2.0, g);
        let mut s = AdamState::default();
        adam_step(&mut p, &mut s, lr).unwrap();
        adam_step(&mut p, &mut s, lr).unwrap();
        assert!((p.get("w").unwrap().values()[0] - w).abs() < 1e-12);
        assert_eq!(s.t, 2);
    }

    #[test]
    fn missing_gradient() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(1.0));
        let mut s = AdamState::default();
        assert!(matches!(
            adam_step(&mut p, &mut s, 0.1),
            Err(AutodiffError::MissingGrad(n)) if n == "a"
        ));
        assert_eq!(s.t, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = one_param(0.7, 1.3);
            let mut s = AdamState::default();
            for _ in 0..3 {
                adam_step(&mut p, &mut s, 1e-3).unwrap();
            }
            (p, s)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.get("w").unwrap().values()[0].to_bits(), b.get("w").unwrap().values()[0].to_bits());
        assert_eq!(sa, sb);
    }
}
