use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// AdamW with decoupled weight decay; moments are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub(crate) fn restore(&mut self, step: u64, moments: BTreeMap<String, Moments>) {
        self.step = step;
        self.moments = moments;
    }

    /// One update over every tracked tensor that carries a gradient.
    /// Tensors without a gradient keep their value but still decay.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params {
            if !p.requires_grad {
                continue;
            }
            let n = p.len();
            let zero;
            let grad: &[f64] = match &p.grad {
                Some(g) if g.len() == n => g,
                Some(g) => {
                    return Err(Error::shape("adamw", p.shape(), &[g.len()]));
                }
                None => {
                    zero = vec![0.0; n];
                    &zero
                }
            };
            let grad = grad.to_vec();
            let m = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    first: vec![0.0; n],
                    second: vec![0.0; n],
                });
            if m.first.len() != n {
                return Err(Error::shape("adamw", p.shape(), &[m.first.len()]));
            }
            let decay = 1.0 - c.lr * c.weight_decay;
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m.first[i] = c.beta1 * m.first[i] + (1.0 - c.beta1) * g;
                m.second[i] = c.beta2 * m.second[i] + (1.0 - c.beta2) * g * g;
                let mhat = m.first[i] / bc1;
                let vhat = m.second[i] / bc2;
                *w = *w * decay - c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
