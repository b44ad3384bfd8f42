use serde::{Deserialize, Serialize};

use super::tensor::{Elem, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments, one buffer pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T: Elem = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Elem> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Every parameter must carry a gradient; nothing is modified otherwise.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        for (name, t) in params.iter() {
            if t.grad().is_none() {
                return Err(Error::MissingGradient(name.to_string()));
            }
        }
        if self.m.len() != params.len() {
            self.m = params
                .tensors()
                .iter()
                .map(|t| vec![T::ZERO; t.numel()])
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        for ((t, m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let g = t.grad().expect("checked above").to_vec();
            for (((p, &gi), mi), vi) in t
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::ONE - b1) * gi;
                *vi = b2 * *vi + (T::ONE - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}
