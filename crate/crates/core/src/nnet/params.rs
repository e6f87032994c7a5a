// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Named tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Panics when `name` is missing; shapes are fixed at construction.
    pub fn tensor(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} missing"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.rows(), t.cols())))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t.clone())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (k, t) in &mut self.tensors {
            t.add_assign(other.tensor(k));
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors.values_mut() {
            t.scale(k);
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors.values().map(Tensor::sum_squares).sum()
    }

    /// One set with names `"{group}/{name}"`.
    pub fn flatten(groups: &BTreeMap<String, ParamSet>) -> ParamSet {
        let mut out = ParamSet::new();
        for (g, set) in groups {
            for (n, t) in set.iter() {
                out.insert(format!("{g}/{n}"), t.clone());
            }
        }
        out
    }

    /// SHA-256 over names, shapes and the little-endian bits of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Handles of a flattened group, with the `"{group}/"` prefix removed.
    pub fn group(&self, group: &str) -> Bound {
        let prefix = format!("{group}/");
        Bound {
            vars: self
                .vars
                .iter()
                .filter_map(|(k, &v)| k.strip_prefix(&prefix).map(|n| (n.to_string(), v)))
                .collect(),
        }
    }

    /// Gradient of each bound tensor, keyed by parameter name.
    pub fn collect(&self, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, &v) in &self.vars {
            out.insert(k.clone(), grads.wrt(v));
        }
        out
    }
}

/// He-normal weights: `N(0, gain / fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, gain: f64) -> Tensor {
    let std = (gain / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
}
