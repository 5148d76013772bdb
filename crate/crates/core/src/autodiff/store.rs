use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Param<S: Scalar> {
    name: String,
    value: Tensor<S>,
    grad: Vec<S>,
    m: Vec<S>,
    v: Vec<S>,
    step: u64,
    trainable: bool,
    lr_scale: f64,
}

/// Named trainable parameters, their accumulated gradients and Adam state.
///
/// Insertion order is preserved and is the canonical iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<S: Scalar> {
    params: Vec<Param<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.params.len());
        let n = value.len();
        self.params.push(Param {
            name: name.clone(),
            value,
            grad: vec![S::zero(); n],
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            step: 0,
            trainable: true,
            lr_scale: 1.0,
        });
        self.by_name.insert(name, id);
        Ok(id)
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

    pub fn get(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[S] {
        &self.params[id.0].grad
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.params[id.0].trainable = on;
    }

    /// Toggle every parameter whose name starts with `prefix`; returns how
    /// many matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, on: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = on;
            n += 1;
        }
        n
    }

    pub fn lr_scale(&self, id: ParamId) -> f64 {
        self.params[id.0].lr_scale
    }

    pub fn set_lr_scale_prefix(&mut self, prefix: &str, scale: f64) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.lr_scale = scale;
            n += 1;
        }
        n
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// `(name, shape)` of every parameter, in order.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    /// Add `scale · g` into the gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients<S>, scale: S) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            for (a, &b) in p.grad.iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// L2 norm over the gradients of trainable parameters.
    pub fn grad_norm(&self) -> S {
        let mut sq = S::zero();
        for p in self.params.iter().filter(|p| p.trainable) {
            for &g in &p.grad {
                sq += g * g;
            }
        }
        sq.sqrt()
    }

    /// Rescale gradients so their norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: S) -> S {
        let norm = self.grad_norm();
        if norm > max_norm {
            let k = max_norm / norm;
            for p in self.params.iter_mut().filter(|p| p.trainable) {
                p.grad.iter_mut().for_each(|g| *g *= k);
            }
        }
        norm
    }

    /// One Adam update with bias correction over trainable parameters,
    /// then zero all gradients. Each parameter's learning rate is
    /// `cfg.lr · lr_scale`.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        let b1 = S::lit(cfg.beta1);
        let b2 = S::lit(cfg.beta2);
        let eps = S::lit(cfg.eps);
        for p in self.params.iter_mut() {
            if p.trainable {
                p.step += 1;
                let t = p.step as i32;
                let c1 = S::one() - b1.powi(t);
                let c2 = S::one() - b2.powi(t);
                let lr = S::lit(cfg.lr * p.lr_scale);
                let value = p.value.data_mut();
                for i in 0..value.len() {
                    let g = p.grad[i];
                    p.m[i] = b1 * p.m[i] + (S::one() - b1) * g;
                    p.v[i] = b2 * p.v[i] + (S::one() - b2) * g * g;
                    let m_hat = p.m[i] / c1;
                    let v_hat = p.v[i] / c2;
                    value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Copy of all parameter values, for best-checkpoint tracking.
    pub fn snapshot(&self) -> Vec<Tensor<S>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<S>]) {
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }

    /// Copy values of every parameter in `src` whose name, after replacing
    /// `src_prefix` with `dst_prefix`, exists here with the same shape.
    pub fn copy_from(&mut self, src: &ParameterStore<S>, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut n = 0;
        for p in &src.params {
            let Some(rest) = p.name.strip_prefix(src_prefix) else {
                continue;
            };
            let name = format!("{dst_prefix}{rest}");
            let id = self.get(&name).ok_or_else(|| {
                Error::Config(format!("parameter {name:?} missing in destination"))
            })?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {name:?}: shape {:?} vs {:?}",
                    dst.value.shape(),
                    p.value.shape()
                )));
            }
            dst.value = p.value.clone();
            n += 1;
        }
        Ok(n)
    }
}
