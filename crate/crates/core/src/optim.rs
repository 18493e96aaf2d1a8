//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ParamGrads, ParamSet, Real};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("optimizer state does not match parameters: {0}")]
    Contract(String),
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
}

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
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(OptimError::Hyper(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(OptimError::Hyper(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(OptimError::Hyper(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Moments are kept in f64 regardless of the parameter precision. Buffer
/// tensors carry empty moment vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Real>(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|t| match t.role {
                crate::nn::TensorRole::Trainable => vec![0.0; t.data.len()],
                crate::nn::TensorRole::Buffer => Vec::new(),
            })
            .collect();
        Self { config, t: 0, m: zeros.clone(), v: zeros }
    }

    fn check<T: Real>(&self, params: &ParamSet<T>, grads: &ParamGrads<T>) -> Result<(), OptimError> {
        let n = params.tensors.len();
        if grads.grads.len() != n || self.m.len() != n || self.v.len() != n {
            return Err(OptimError::Contract(format!(
                "{} tensors, {} gradients, {} moments",
                n,
                grads.grads.len(),
                self.m.len()
            )));
        }
        for (i, t) in params.tensors.iter().enumerate() {
            let want = match t.role {
                crate::nn::TensorRole::Trainable => t.data.len(),
                crate::nn::TensorRole::Buffer => 0,
            };
            if grads.grads[i].len() != want || self.m[i].len() != want || self.v[i].len() != want {
                return Err(OptimError::Contract(format!("tensor {} has mismatched lengths", t.name)));
            }
        }
        Ok(())
    }

    /// One update of every trainable, non-frozen tensor.
    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &ParamGrads<T>) -> Result<(), OptimError> {
        self.check(params, grads)?;
        let t = self
            .t
            .checked_add(1)
            .ok_or_else(|| OptimError::Contract("step counter overflow".into()))?;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let exp = i32::try_from(t).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(exp);
        let c2 = 1.0 - beta2.powi(exp);
        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            if !tensor.is_trainable() {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((theta, g), (mi, vi)) in tensor
                .data
                .iter_mut()
                .zip(&grads.grads[i])
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g.f64();
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta = T::of(theta.f64() - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        self.t = t;
        Ok(())
    }
}
