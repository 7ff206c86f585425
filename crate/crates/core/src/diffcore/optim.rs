//! First-order optimizers operating on a [`ParamSet`] in place.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{GradMap, ParamSet};
use crate::error::{Error, Result};

pub trait Optimizer {
    /// Applies one update with learning rate `lr`.
    fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

/// Plain gradient descent: `p -= lr * g`.
#[derive(Debug, Default, Clone)]
pub struct Sgd;

fn check_grad(name: &str, p_len: usize, grads: &GradMap) -> Result<()> {
    match grads.get(name) {
        Some(g) if g.len() == p_len => Ok(()),
        Some(g) => Err(Error::shape("optimizer_step", format!("`{name}`: grad len {} vs {p_len}", g.len()))),
        None => Ok(()),
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
        for (name, p) in params.iter_mut() {
            check_grad(name, p.len(), grads)?;
            if let Some(g) = grads.get(name) {
                p.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(w, d)| *w -= lr * d);
            }
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.02)
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, params: &mut ParamSet, grads: &GradMap, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            check_grad(name, p.len(), grads)?;
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let d = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * d;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * d * d;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

pub fn make_optimizer(kind: OptimizerKind, weight_decay: f64) -> Box<dyn Optimizer + Send> {
    match kind {
        OptimizerKind::Sgd => Box::new(Sgd),
        OptimizerKind::AdamW => Box::new(AdamW::new(weight_decay)),
    }
}
