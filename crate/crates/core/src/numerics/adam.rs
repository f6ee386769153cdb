//! Adam optimizer with per-parameter first/second moment state.

use std::collections::HashMap;

use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
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

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Keyed Adam state. Each parameter name owns independent moments;
/// the step counter is shared and advanced once per `begin_step`.
pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    t: u64,
    state: HashMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            state: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Advances the shared step counter. Call once before updating the
    /// parameters of one optimization step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies one Adam update to a single parameter.
    pub fn update_param(&mut self, name: &str, param: &mut Tensor<T>, grad: &[T], lr: f64) {
        assert!(self.t > 0, "begin_step must be called before update_param");
        assert_eq!(param.len(), grad.len(), "gradient shape mismatch for {name}");
        let n = param.len();
        let entry = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![T::ZERO; n],
            v: vec![T::ZERO; n],
        });
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let bc1 = T::from_f64(1.0 / (1.0 - self.cfg.beta1.powi(self.t as i32)));
        let bc2 = T::from_f64(1.0 / (1.0 - self.cfg.beta2.powi(self.t as i32)));
        let lr_t = T::from_f64(lr);
        let data = param.data_mut();
        for i in 0..n {
            let g = grad[i];
            entry.m[i] = b1 * entry.m[i] + one_m_b1 * g;
            entry.v[i] = b2 * entry.v[i] + one_m_b2 * g * g;
            let m_hat = entry.m[i] * bc1;
            let v_hat = entry.v[i] * bc2;
            data[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
