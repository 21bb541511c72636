use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};
use super::tensor::Real;
use crate::error::NnError;

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
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            t: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_network(config: AdamConfig, net: &Network<T>) -> Self {
        let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
        Self::new(config, &sizes)
    }

    /// One update of `params` in place. Nothing is modified when a gradient
    /// is non-finite or shapes disagree.
    pub fn step(&mut self, params: &mut [&mut Vec<T>], grads: &[Vec<T>]) -> Result<(), NnError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NnError::Shape {
                expected: self.m.iter().map(|m| m.len()).collect(),
                actual: grads.iter().map(|g| g.len()).collect(),
            });
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.len() != g.len() || g.len() != m.len() {
                return Err(NnError::Shape {
                    expected: vec![m.len()],
                    actual: vec![g.len()],
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient(i));
            }
        }

        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let corr1 = T::from_f64(1.0 - c.beta1.powi(self.t as i32));
        let corr2 = T::from_f64(1.0 - c.beta2.powi(self.t as i32));
        let lr = T::from_f64(c.learning_rate);
        let eps = T::from_f64(c.epsilon);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..g.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<(), NnError> {
        let mut params = net.params_mut();
        self.step(&mut params, &grads.tensors)
    }
}
