use serde::{Deserialize, Serialize};

use crate::config::OptimConfig;
use crate::numerics::{Tensor, TensorError};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamScalars {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
}

/// Adam with bias correction. Weight decay is added to the gradient
/// (`g + weight_decay * theta`) before the moment updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub scalars: AdamScalars,
    /// First and second moments, one tensor per stored parameter.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &OptimConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            scalars: AdamScalars {
                lr: cfg.lr,
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.eps,
                weight_decay: cfg.weight_decay,
                step: 0,
            },
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.scalars.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.scalars.lr = lr;
    }

    /// One update of the listed parameters. Parameters without a gradient
    /// entry are left alone; non-trainable ones are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<(), TensorError> {
        for (id, g) in grads {
            let p = store.get(*id);
            if p.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.scalars.step += 1;
        let AdamScalars {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step,
        } = self.scalars;
        let c1 = 1.0 - beta1.powi(step as i32);
        let c2 = 1.0 - beta2.powi(step as i32);
        for (id, g) in grads {
            if !store.param(*id).trainable {
                continue;
            }
            let theta = store.get_mut(*id).data_mut();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i] + weight_decay * theta[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
