//! ADADELTA with a learning-rate multiplier.
//!
//! ```text
//! E[g^2]  <- rho E[g^2]  + (1 - rho) g^2
//! delta    = sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
//! E[dx^2] <- rho E[dx^2] + (1 - rho) delta^2
//! theta   <- theta - lr * delta
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            rho: 0.95,
            eps: 1e-6,
            lr: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adadelta {
    pub config: AdadeltaConfig,
    sq_grad: Vec<Tensor4>,
    sq_delta: Vec<Tensor4>,
}

impl Adadelta {
    /// Zero accumulators congruent with `params`.
    pub fn new(config: AdadeltaConfig, params: &[Tensor4]) -> Self {
        let zeros: Vec<Tensor4> = params.iter().map(|p| Tensor4::zeros(p.dims())).collect();
        Self {
            config,
            sq_grad: zeros.clone(),
            sq_delta: zeros,
        }
    }

    pub fn from_accumulators(config: AdadeltaConfig, sq_grad: Vec<Tensor4>, sq_delta: Vec<Tensor4>) -> Self {
        Self {
            config,
            sq_grad,
            sq_delta,
        }
    }

    pub fn accumulators(&self) -> (&[Tensor4], &[Tensor4]) {
        (&self.sq_grad, &self.sq_delta)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite
    /// or shapes disagree.
    pub fn step(&mut self, params: &mut [Tensor4], grads: &[Tensor4]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.sq_grad.len() {
            return Err(Error::Architecture(format!(
                "{} parameters, {} gradients, {} accumulators",
                params.len(),
                grads.len(),
                self.sq_grad.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.dims() != g.dims() || p.dims() != self.sq_grad[i].dims() {
                return Err(Error::ShapeMismatch {
                    expected: p.dims(),
                    found: g.dims(),
                });
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(i));
            }
        }
        let AdadeltaConfig { rho, eps, lr } = self.config;
        for ((p, g), (eg, ed)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.sq_grad.iter_mut().zip(self.sq_delta.iter_mut()))
        {
            let p = p.data_mut();
            let eg = eg.data_mut();
            let ed = ed.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                eg[i] = rho * eg[i] + (1.0 - rho) * gi * gi;
                let delta = (ed[i] + eps).sqrt() / (eg[i] + eps).sqrt() * gi;
                ed[i] = rho * ed[i] + (1.0 - rho) * delta * delta;
                p[i] -= lr * delta;
            }
        }
        Ok(())
    }
}
