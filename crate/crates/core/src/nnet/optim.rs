// SPDX-License-Identifier: Apache-2.0

//! First-order optimizers over named parameter groups, plus global-norm
//! gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;

/// Parameter sets keyed by group (`"lidar"`, `"plrc"`, ...).
pub type Groups = BTreeMap<String, ParamSet>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Groups,
    v: Groups,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Groups::new(),
            v: Groups::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter in `params` that has an entry in `grads`.
    pub fn apply(&mut self, params: &mut Groups, grads: &Groups) {
        self.step += 1;
        let t = self.step as i32;
        for (g, set) in params.iter_mut() {
            let Some(gset) = grads.get(g) else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (name, p) in set.iter_mut() {
                        let grad = gset.tensor(name);
                        for (x, d) in p.data_mut().iter_mut().zip(grad.data()) {
                            *x -= self.lr * d;
                        }
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(g.clone()).or_insert_with(|| gset.zeros_like());
                    let v = self.v.entry(g.clone()).or_insert_with(|| gset.zeros_like());
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for (name, p) in set.iter_mut() {
                        let grad = gset.tensor(name).data();
                        let mt = m.get_mut(name).expect("moment shape").data_mut();
                        let vt = v.get_mut(name).expect("moment shape").data_mut();
                        for (i, x) in p.data_mut().iter_mut().enumerate() {
                            let d = grad[i];
                            mt[i] = self.beta1 * mt[i] + (1.0 - self.beta1) * d;
                            vt[i] = self.beta2 * vt[i] + (1.0 - self.beta2) * d * d;
                            let mhat = mt[i] / c1;
                            let vhat = vt[i] / c2;
                            *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
                        }
                    }
                }
            }
        }
    }
}

pub fn global_norm(grads: &Groups) -> f64 {
    grads.values().map(ParamSet::sum_squares).sum::<f64>().sqrt()
}

/// Rescales to `max_norm` when the global norm exceeds it; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut Groups, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip norm must be positive");
    let g = global_norm(grads);
    if g > max_norm {
        let k = max_norm / g;
        for set in grads.values_mut() {
            set.scale(k);
        }
    }
    g
}
