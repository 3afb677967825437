//! Stochastic gradient descent with L2 weight decay and optional momentum.

use crate::nn::{Grads, ParamSet};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

pub struct Sgd<F> {
    cfg: SgdConfig,
    velocity: Option<Vec<Vec<F>>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: None,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.cfg.learning_rate
    }

    /// One step: g ← grad + wd·θ; v ← μ·v + g; θ ← θ − lr·v.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &Grads<F>) {
        let lr = F::from_f64(self.cfg.learning_rate);
        let wd = F::from_f64(self.cfg.weight_decay);
        let mu = F::from_f64(self.cfg.momentum);
        let use_momentum = self.cfg.momentum != 0.0;
        if use_momentum && self.velocity.is_none() {
            self.velocity = Some(
                params
                    .tensors
                    .iter()
                    .map(|t| vec![F::zero(); t.data.len()])
                    .collect(),
            );
        }
        for (pi, tensor) in params.tensors.iter_mut().enumerate() {
            let grad = &grads.by_param[pi];
            if use_momentum {
                let vel = &mut self.velocity.as_mut().unwrap()[pi];
                for ((p, &g), v) in tensor.data.iter_mut().zip(grad).zip(vel.iter_mut()) {
                    let adjusted = g + wd * *p;
                    *v = mu * *v + adjusted;
                    *p = *p - lr * *v;
                }
            } else {
                for (p, &g) in tensor.data.iter_mut().zip(grad) {
                    let adjusted = g + wd * *p;
                    *p = *p - lr * adjusted;
                }
            }
        }
    }
}
