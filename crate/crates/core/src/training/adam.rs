use serde::{Deserialize, Serialize};

use crate::numerics::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for one tensor, kept in f64.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam step at time `t` (1-based).
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut Moments,
    t: u64,
    cfg: &AdamConfig,
) {
    assert_eq!(param.len(), grad.len(), "adam: param/grad length");
    if state.m.len() != param.len() {
        *state = Moments::zeros(param.len());
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let step = cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        if step != 0.0 {
            param[i] = T::cast(param[i].as_f64() - step);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = [0.5f32, -1.25, 3.0];
        let before = p;
        let mut s = Moments::default();
        adam_update(&mut p, &[0.0; 3], &mut s, 1, &AdamConfig::default());
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = [1.0f64];
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        adam_update(&mut p, &[1.0], &mut Moments::default(), 1, &cfg);
        assert!((p[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_learning_rate_is_bitwise_no_op() {
        let mut p = [0.1f32, 7.0];
        let cfg = AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        };
        adam_update(&mut p, &[0.3, -2.0], &mut Moments::default(), 1, &cfg);
        assert_eq!(p, [0.1f32, 7.0]);
    }

    #[test]
    fn matches_scalar_oracle() {
        let cfg = AdamConfig {
            learning_rate: 0.05,
            beta1: 0.8,
            beta2: 0.99,
            epsilon: 1e-6,
        };
        let grads = [0.3, -1.2, 0.7, 2.5, -0.1, 0.0, 0.4, -0.9, 1.1, 0.05];
        let mut p = [2.0f64];
        let mut s = Moments::default();
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            adam_update(&mut p, &[g], &mut s, t as u64, &cfg);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            x -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            assert!((p[0] - x).abs() < 1e-7);
        }
    }
}
