//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for a list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Tensor], cfg: &AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

/// One Adam update of `params` in place. Non-finite gradients abort the
/// step before anything is modified.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter #{i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 0.5])];
        let g = vec![Tensor::vector(vec![3.0, -0.2, 40.0])];
        let mut st = AdamState::new(&p, &cfg(0.01));
        adam_step(&mut p, &g, &mut st).unwrap();
        let delta: Vec<f64> = p[0].data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
        for (d, gi) in delta.iter().zip(g[0].data()) {
            assert!((d.abs() - 0.01).abs() < 1e-8, "{d}");
            assert_eq!(d.signum(), -gi.signum());
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grad_leaves_params_and_decays_moments() {
        let mut p = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut st = AdamState::new(&p, &cfg(0.1));
        st.m[0] = Tensor::vector(vec![0.5, -0.5]);
        st.v[0] = Tensor::vector(vec![0.0, 0.0]);
        let g = vec![Tensor::zeros(&[2])];
        let before = p.clone();
        // moments are nonzero, so only check the pure-zero case for the delta
        let mut fresh = AdamState::new(&p, &cfg(0.1));
        adam_step(&mut p, &g, &mut fresh).unwrap();
        assert_eq!(p, before);
        let mut q = before.clone();
        adam_step(&mut q, &g, &mut st).unwrap();
        assert_eq!(st.m[0].data(), &[0.45, -0.45]);
    }

    #[test]
    fn quadratic_decreases_two_steps() {
        // f(w) = w^2, grad 2w
        let mut w = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&w, &cfg(0.1));
        let mut prev = 1.0;
        for _ in 0..2 {
            let g = vec![Tensor::scalar(2.0 * w[0].item())];
            adam_step(&mut w, &g, &mut st).unwrap();
            assert!(w[0].item() < prev);
            prev = w[0].item();
        }
        // step 1: m̂/√v̂ = 1 so w = 0.9; step 2 with g = 1.8:
        // m̂ = 0.36/0.19, v̂ = 0.007236/0.001999
        let expected = 0.9 - 0.1 * (0.36 / 0.19) / (0.007236f64 / 0.001999).sqrt();
        // eps = 1e-8 in the denominators shifts the result by ~1e-9
        assert!((prev - expected).abs() < 1e-8, "{prev} vs {expected}");
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&p, &cfg(0.1));
        let err = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut st).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(st.step, 0);
        assert_eq!(p[0].item(), 1.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }
}
