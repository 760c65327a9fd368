use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::{Mat, ParamStore};

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

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Applies one update. Gradients must be aligned with the store's
    /// registration order. A non-finite gradient aborts the step before any
    /// parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Mat]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(NnError::Shape {
                op: "adam_step",
                left: (params.len(), 1),
                right: (grads.len(), 1),
            });
        }
        for (id, name, value) in params.iter() {
            let g = &grads[id.index()];
            if g.dim() != value.dim() {
                return Err(NnError::Shape {
                    op: "adam_step",
                    left: value.dim(),
                    right: g.dim(),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(NnError::NonFiniteGradient(name.to_string()));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, value) in params.values_mut().iter_mut().enumerate() {
            Zip::from(value)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn single(value: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store
            .add("theta", Array2::from_elem((1, 1), value))
            .unwrap();
        store
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = single(0.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store, &[Array2::ones((1, 1))]).unwrap();
        let theta = store.values()[0][[0, 0]];
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((theta + 1e-3).abs() < 1e-6, "theta = {theta}");
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut store = single(0.37);
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut store, &[Array2::zeros((1, 1))]).unwrap();
        }
        assert_eq!(store.values()[0][[0, 0]], 0.37);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut store = single(1.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let err = adam
            .step(&mut store, &[Array2::from_elem((1, 1), f64::NAN)])
            .unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGradient(ref n) if n == "theta"));
        assert_eq!(store.values()[0][[0, 0]], 1.0);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut store = single(0.5);
            let mut adam = Adam::new(&store, AdamConfig::default());
            let mut trace = Vec::new();
            for k in 0..20 {
                let x = store.values()[0][[0, 0]];
                let g = 2.0 * (x - 3.0) + 0.1 * (k as f64).sin();
                adam.step(&mut store, &[Array2::from_elem((1, 1), g)])
                    .unwrap();
                trace.push(store.values()[0][[0, 0]].to_bits());
            }
            trace
        };
        assert_eq!(run(), run());
    }
}
