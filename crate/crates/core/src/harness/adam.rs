//! Bias-corrected Adam.

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One update of every parameter with its gradient. Moment buffers are
/// created on the first call and must stay congruent afterwards.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), TensorError> {
    if params.len() != grads.len() {
        return Err(TensorError::shape(
            "adam_step",
            format!("{} params but {} grads", params.len(), grads.len()),
        ));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(TensorError::shape(
            "adam_step",
            format!(
                "state holds {} tensors, got {}",
                state.m.len(),
                params.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != p.len() {
            return Err(TensorError::shape(
                "adam_step",
                format!(
                    "param {i}: {} values, grad {} values, state {}",
                    p.len(),
                    g.len(),
                    state.m[i].len()
                ),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(&[1.0, -2.0]);
        let mut s = AdamState::new();
        adam_step(&mut [&mut p], &[&[0.0, 0.0]], &mut s, &AdamHyper::default()).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let h = AdamHyper::default();
        for g in [0.3, -5.0, 1e-3] {
            let mut p = Tensor::zeros(vec![4]);
            adam_step(&mut [&mut p], &[&[g; 4]], &mut AdamState::new(), &h).unwrap();
            for &w in p.data() {
                assert!((w + h.learning_rate * g.signum()).abs() < 1e-6, "{w}");
            }
        }
    }

    #[test]
    fn state_makes_steps_differ() {
        let h = AdamHyper::default();
        let mut s = AdamState::new();
        let mut p = Tensor::vector(&[0.0]);
        adam_step(&mut [&mut p], &[&[1.0]], &mut s, &h).unwrap();
        let first = p.data()[0];
        adam_step(&mut [&mut p], &[&[0.5]], &mut s, &h).unwrap();
        let second = p.data()[0] - first;
        assert!((second - first).abs() > 1e-6);
    }

    #[test]
    fn mismatches_rejected() {
        let mut p = Tensor::vector(&[0.0, 1.0]);
        let mut s = AdamState::new();
        assert!(adam_step(&mut [&mut p], &[&[1.0]], &mut s, &AdamHyper::default()).is_err());
        assert!(adam_step(&mut [&mut p], &[], &mut s, &AdamHyper::default()).is_err());
    }
}
