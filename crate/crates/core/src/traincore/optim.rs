//! Adam and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl OptimState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            config,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update. A rejected step leaves `state` and `params` untouched.
pub fn adam_step(state: &mut OptimState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    let n = state.len();
    if params.len() != n || grads.len() != n {
        return Err(Error::Length {
            expected: n,
            got: if params.len() != n { params.len() } else { grads.len() },
        });
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Range(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// `0.5 * (1 + cos(pi * t / T)) * base_lr`.
pub fn cosine_lr(t: usize, total: usize, base_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Range("schedule length must be at least 1".into()));
    }
    if t > total {
        return Err(Error::Range(format!("step {t} beyond schedule length {total}")));
    }
    let frac = t as f64 / total as f64;
    Ok(0.5 * (1.0 + (std::f64::consts::PI * frac).cos()) * base_lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = OptimState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut s, &mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = OptimState::new(1, AdamConfig::default());
        let mut p = vec![0.0];
        adam_step(&mut s, &mut p, &[1.0], 0.1).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8, "{}", p[0]);
    }

    #[test]
    fn rejects_bad_input() {
        let mut s = OptimState::new(2, AdamConfig::default());
        let mut p = vec![0.0; 2];
        assert!(matches!(
            adam_step(&mut s, &mut p, &[f64::NAN, 0.0], 0.1),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(s.t, 0);
        assert!(adam_step(&mut s, &mut p, &[0.0], 0.1).is_err());
        assert!(adam_step(&mut s, &mut p, &[0.0; 2], 0.0).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 2e-4).unwrap(), 2e-4);
        assert!(cosine_lr(100, 100, 2e-4).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, 100, 2e-4).unwrap() - 1e-4).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 2e-4).is_err());
        assert!(cosine_lr(0, 0, 2e-4).is_err());
    }
}
