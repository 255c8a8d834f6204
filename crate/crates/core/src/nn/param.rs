//! Parameter storage shared by layers, graphs, and the optimizer.
//!
//! Layers own [`ParamId`]s, never tensors, so the same layer struct can be
//! (de)serialized, frozen, or optimized without borrow gymnastics. Gradients
//! live in a separate [`GradStore`] keyed by id; the optimizer walks the
//! store deterministically (ids are ordered).

use std::collections::BTreeMap;

use super::tensor::{Scalar, Tensor};
use crate::rng::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter<E> {
    pub name: String,
    pub value: Tensor<E>,
    /// First/second moment estimates (lazily zero until the first step).
    pub m: Tensor<E>,
    pub v: Tensor<E>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<E> {
    params: Vec<Parameter<E>>,
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<E>) -> ParamId {
        let (r, c) = (value.rows, value.cols);
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Gaussian init with the given std.
    pub fn add_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut Rng) -> ParamId {
        let dist = Normal::new(0.0f64, std).expect("std must be finite");
        let data = (0..rows * cols)
            .map(|_| E::from_f64(dist.sample(rng)))
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    /// Xavier/Glorot init for a din x dout weight.
    pub fn add_xavier(&mut self, name: &str, din: usize, dout: usize, rng: &mut Rng) -> ParamId {
        let std = (2.0 / (din + dout) as f64).sqrt();
        self.add_normal(name, din, dout, std, rng)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<E> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut() {
            if p.name.starts_with(prefix) {
                p.trainable = false;
                n += 1;
            }
        }
        n
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }
}

/// Gradients for one optimization step. BTreeMap so accumulation and the
/// optimizer sweep happen in a fixed order regardless of graph build order.
#[derive(Debug, Clone, Default)]
pub struct GradStore<E> {
    grads: BTreeMap<ParamId, Tensor<E>>,
}

impl<E: Scalar> GradStore<E> {
    pub fn new() -> Self {
        GradStore {
            grads: BTreeMap::new(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<E>, scale: E) {
        match self.grads.get_mut(&id) {
            Some(g) => g.add_scaled(grad, scale),
            None => {
                let mut g = Tensor::zeros(grad.rows, grad.cols);
                g.add_scaled(grad, scale);
                self.grads.insert(id, g);
            }
        }
    }

    /// Fold another store into this one (ordered, deterministic).
    pub fn merge(&mut self, other: &GradStore<E>) {
        for (&id, g) in &other.grads {
            self.accumulate(id, g, E::one());
        }
    }

    pub fn scale_all(&mut self, c: E) {
        for g in self.grads.values_mut() {
            g.scale_in_place(c);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.grads.get(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<E>)> {
        self.grads.iter().map(|(&id, g)| (id, g))
    }

    /// L2 norm of the gradients of every non-trainable parameter. A correct
    /// graph never routes gradient into frozen parameters, so this is 0.0
    /// exactly; the training loops assert on it each epoch.
    pub fn frozen_grad_norm(&self, params: &ParamSet<E>) -> f64 {
        let mut acc = 0.0f64;
        for (id, g) in self.iter() {
            if !params.get(id).trainable {
                acc += g.data.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>();
            }
        }
        acc.sqrt()
    }
}
