//! Adam optimizer with bias-corrected moments.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::nn::tensor::{ParamSet, Real};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment per parameter plus the step counter.
pub struct AdamState<F> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamSet<F>, cfg: AdamConfig) -> Self {
        let m = params
            .iter()
            .map(|p| ArrayD::zeros(p.value.raw_dim()))
            .collect();
        let v = params
            .iter()
            .map(|p| ArrayD::zeros(p.value.raw_dim()))
            .collect();
        AdamState {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// One update from the accumulated gradients; gradients are zeroed
    /// afterwards.
    pub fn step(&mut self, params: &mut ParamSet<F>) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let one = F::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let lr = F::from_f64(self.cfg.lr);
        let eps = F::from_f64(self.cfg.eps);

        for (idx, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|val, &g, mi, vi| {
                    *mi = b1 * *mi + (one - b1) * g;
                    *vi = b2 * *vi + (one - b2) * g * g;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *val = *val - lr * mhat / (vhat.sqrt() + eps);
                });
        }
        params.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = ParamSet::<f64>::new();
        let w = params.add("w", ArrayD::from_elem(IxDyn(&[3]), 1.5));
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.step(&mut params);
        adam.step(&mut params);
        assert!(params.get(w).value.iter().all(|&v| v == 1.5));
        assert_eq!(adam.step_count(), 2);
    }

    #[test]
    fn quadratic_reaches_minimizer() {
        // f(w) = (w - 3)^2, minimized by gradient 2(w - 3)
        let mut params = ParamSet::<f64>::new();
        let w = params.add("w", ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let mut adam = AdamState::new(&params, AdamConfig::with_lr(1e-2));
        for _ in 0..500 {
            let val = params.get(w).value[[0]];
            let grad = ArrayD::from_elem(IxDyn(&[1]), 2.0 * (val - 3.0));
            params.accumulate_grad(w, &grad).unwrap();
            adam.step(&mut params);
        }
        let final_w = params.get(w).value[[0]];
        assert!((final_w - 3.0).abs() < 1e-3, "final {final_w}");
    }

    #[test]
    fn step_count_increments_once_per_call() {
        let mut params = ParamSet::<f64>::new();
        params.add("w", ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let mut adam = AdamState::new(&params, AdamConfig::default());
        for want in 1..=5u64 {
            adam.step(&mut params);
            assert_eq!(adam.step_count(), want);
        }
    }
}
