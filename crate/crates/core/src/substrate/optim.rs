use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam hyperparameters and the inverse-square-root warmup schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier on `min(step^-1/2, step · warmup^-3/2)`; the peak rate,
    /// reached at `step == warmup_steps`, is `lr_factor / sqrt(warmup_steps)`.
    pub lr_factor: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            lr_factor: 0.0316,
            warmup_steps: 1000,
        }
    }
}

impl AdamConfig {
    /// Learning rate for the 1-based step `step`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.lr_factor * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Matrix> = store
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        AdamState {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update using the gradients held in
    /// `store`. Gradients are left untouched; callers zero them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        assert_eq!(
            self.m.len(),
            store.len(),
            "optimizer built for a different store"
        );
        let next = self.step + 1;
        for p in store.iter() {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite {
                    name: p.name.clone(),
                    step: next,
                });
            }
        }
        self.step = next;
        let c = &self.config;
        let lr = c.learning_rate(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (w, g) = (p.value.data_mut(), p.grad.data());
            for i in 0..w.len() {
                let gi = g[i];
                let mi = &mut m.data_mut()[i];
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Matrix::filled(1, 1, x));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(0.75);
        let mut opt = AdamState::new(AdamConfig::default(), &store);
        for _ in 0..10 {
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.iter().next().unwrap().value.get(0, 0), 0.75);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = scalar_store(0.0);
        let cfg = AdamConfig::default();
        let lr = cfg.learning_rate(1);
        let mut opt = AdamState::new(cfg.clone(), &store);
        store.iter_mut().next().unwrap().grad.fill(1.0);
        opt.step(&mut store).unwrap();
        let moved = store.iter().next().unwrap().value.get(0, 0);
        // closed form: m̂ = g, v̂ = g², Δ = -lr · g / (|g| + ε)
        let want = -lr / (1.0 + cfg.eps);
        assert!((moved - want).abs() < 1e-18, "{moved} vs {want}");
        assert!(moved < 0.0);
    }

    #[test]
    fn schedule_peaks_at_warmup() {
        let cfg = AdamConfig {
            lr_factor: 1.0,
            warmup_steps: 100,
            ..AdamConfig::default()
        };
        let peak = cfg.learning_rate(100);
        assert!((peak - 0.1).abs() < 1e-12);
        assert!(cfg.learning_rate(50) < peak);
        assert!(cfg.learning_rate(400) < peak);
        assert!((cfg.learning_rate(400) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = scalar_store(0.0);
        let mut opt = AdamState::new(AdamConfig::default(), &store);
        store.iter_mut().next().unwrap().grad.fill(f64::NAN);
        match opt.step(&mut store) {
            Err(Error::NonFinite { name, step }) => {
                assert_eq!(name, "w");
                assert_eq!(step, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
