//! Adam optimizer with bias correction.

use alloc::string::String;
use alloc::vec::Vec;

use core::fmt;

use crate::param::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Adam hyper-parameters; `Default` gives the standard
/// β₁=0.9, β₂=0.999, ε=1e-8, η=1e-3.
#[derive(Debug, Clone, Copy, PartialEq)]
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

#[derive(Debug, Clone, PartialEq)]
pub enum AdamError {
    /// A trainable parameter has no gradient entry.
    MissingGradient { name: String },
    /// Gradient shape does not match the parameter shape.
    ShapeMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

impl fmt::Display for AdamError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdamError::MissingGradient { name } => {
                write!(f, "no gradient provided for trainable parameter {name:?}")
            }
            AdamError::ShapeMismatch { name, param, grad } => write!(
                f,
                "gradient shape {grad:?} does not match parameter {name:?} of shape {param:?}"
            ),
        }
    }
}

impl core::error::Error for AdamError {}

/// First/second moment buffers per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    /// Zero-initialised moments shaped after the store's parameters.
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.tensor.rows(), p.tensor.cols()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            config,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One Adam update over every trainable parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), AdamError> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, t as f64);
        let bc2 = 1.0 - libm::pow(beta2, t as f64);

        for idx in 0..store.len() {
            let id = crate::param::ParamId(idx);
            if !store.get(id).trainable {
                continue;
            }
            let grad = grads.get(id).ok_or_else(|| AdamError::MissingGradient {
                name: store.get(id).name.clone(),
            })?;
            let param = store.get_mut(id);
            if grad.shape() != param.tensor.shape() {
                return Err(AdamError::ShapeMismatch {
                    name: param.name.clone(),
                    param: param.tensor.shape().to_vec(),
                    grad: grad.shape().to_vec(),
                });
            }
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let w = param.tensor.data_mut();
            for ((w, (m, v)), &g) in w
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(grad.data())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= learning_rate * m_hat / (libm::sqrt(v_hat) + epsilon);
            }
        }
        Ok(())
    }
}
