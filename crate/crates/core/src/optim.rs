use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.is_empty() && state.v.is_empty() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::shape("adam", &[param.len()], &[grad.len()]));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a fixed subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    ids: Vec<ParamId>,
    step: u64,
    state: HashMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, ids: Vec<ParamId>) -> Self {
        Self {
            config,
            ids,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Applies one update to every owned parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step += 1;
        for id in &self.ids {
            let Some(g) = grads.param(*id) else { continue };
            let moments = self.state.entry(*id).or_default();
            adam_update(store.get_mut(*id).data_mut(), g, moments, self.step, &self.config)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.5, -2.0];
        let mut s = Moments::default();
        adam_update(&mut p, &[0.0, 0.0], &mut s, 1, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0, 0.0];
        let mut s = Moments::default();
        adam_update(&mut p, &[0.3, -7.0], &mut s, 1, &cfg).unwrap();
        assert_relative_eq!(p[0], -cfg.lr, max_relative = 1e-6);
        assert_relative_eq!(p[1], cfg.lr, max_relative = 1e-6);
    }

    #[test]
    fn two_steps_match_hand_recursion() {
        // g = 2 on both steps, lr = 0.1
        // t=1: m=0.2, v=0.004, m_hat=2, v_hat=4 -> step 0.1*2/(2+1e-8)
        // t=2: m=0.38, v=0.007996, m_hat=0.38/0.19=2, v_hat=0.007996/0.001999=4
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = vec![1.0];
        let mut s = Moments::default();
        adam_update(&mut p, &[2.0], &mut s, 1, &cfg).unwrap();
        adam_update(&mut p, &[2.0], &mut s, 2, &cfg).unwrap();
        let one_step = 0.1 * 2.0 / (2.0 + 1e-8);
        assert_relative_eq!(p[0], 1.0 - 2.0 * one_step, max_relative = 1e-12);
        assert_relative_eq!(s.m[0], 0.38, max_relative = 1e-12);
        assert_relative_eq!(s.v[0], 0.007996, max_relative = 1e-12);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = vec![0.0; 3];
        let mut s = Moments::default();
        assert!(adam_update(&mut p, &[1.0], &mut s, 1, &AdamConfig::default()).is_err());
    }
}
