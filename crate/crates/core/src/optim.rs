//! Gradient descent with momentum that honours update exemptions: tensors
//! with `requires_grad == false` and entries marked in a `fixed` mask are
//! never written.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Detector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Rescale gradients whose global norm exceeds this. The norm only
    /// counts entries the optimizer is allowed to update.
    #[serde(default)]
    pub max_grad_norm: Option<f32>,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("max_grad_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: BTreeMap::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    /// Norm of the gradient entries an update would apply.
    pub fn update_grad_norm(model: &Detector) -> f64 {
        model
            .params()
            .filter(|p| p.requires_grad)
            .flat_map(|p| {
                p.grad.iter().enumerate().filter_map(move |(i, g)| {
                    (!p.fixed.as_ref().is_some_and(|m| m[i])).then_some(*g as f64 * *g as f64)
                })
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update from the gradients currently stored in `model`.
    pub fn step(&mut self, model: &mut Detector) {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
            max_grad_norm,
        } = self.config;
        let scale = match max_grad_norm {
            Some(c) => {
                let n = Self::update_grad_norm(model);
                if n > c as f64 {
                    (c as f64 / n) as f32
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for p in model.params_mut().filter(|p| p.requires_grad) {
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.value.len()]);
            for i in 0..p.value.len() {
                if p.fixed.as_ref().is_some_and(|m| m[i]) {
                    continue;
                }
                let g = scale * p.grad[i] + weight_decay * p.value[i];
                v[i] = momentum * v[i] + g;
                p.value[i] -= lr * v[i];
            }
        }
    }
}
