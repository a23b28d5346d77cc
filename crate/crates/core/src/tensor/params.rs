use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{contract_err, Error, Result};

#[derive(Clone, Debug)]
struct Param<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient norm of the updated set down to this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Named parameters plus their gradients and Adam moments.
///
/// Names are dotted paths (`encoder.block0.wq`); the leading component is
/// the checkpoint section the tensor belongs to.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(contract_err!("duplicate parameter `{name}`"));
        }
        let n = value.len();
        self.params.insert(
            name,
            Param {
                value,
                grad: None,
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                step: 0,
            },
        );
        Ok(())
    }

    /// Overwrites the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Missing(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn step_count(&self, name: &str) -> Option<u64> {
        self.params.get(name).map(|p| p.step)
    }

    pub(crate) fn set_grad(&mut self, name: &str, grad: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Missing(name.to_string()))?;
        if p.value.shape() != grad.shape() {
            return Err(Error::Shape {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: grad.shape().to_vec(),
            });
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Moves every parameter of `other` into `self`.
    pub fn merge(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, p) in other.params {
            if self.params.contains_key(&k) {
                return Err(contract_err!("duplicate parameter `{k}`"));
            }
            self.params.insert(k, p);
        }
        Ok(())
    }

    /// Copy of the parameters under `prefix`, without optimizer state.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, p) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.insert(k.clone(), p.value.clone()).expect("unique keys");
        }
        out
    }

    /// Same parameters converted to another precision (optimizer state reset).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, p) in &self.params {
            out.insert(k.clone(), p.value.cast()).expect("unique keys");
        }
        out
    }

    /// One bias-corrected Adam update of every parameter whose name starts
    /// with one of `prefixes`. Each of them must hold a gradient; gradients
    /// are consumed.
    pub fn adam_step(&mut self, cfg: &AdamConfig, prefixes: &[&str]) -> Result<()> {
        let selected: Vec<String> = self
            .params
            .keys()
            .filter(|k| prefixes.iter().any(|p| k.starts_with(p)))
            .cloned()
            .collect();
        if selected.is_empty() {
            return Err(contract_err!("adam_step: no parameters match {prefixes:?}"));
        }
        if let Some(name) = selected.iter().find(|k| self.params[*k].grad.is_none()) {
            return Err(contract_err!("adam_step: missing gradient for `{name}`"));
        }
        let mut scale = T::one();
        if let Some(max) = cfg.clip_norm {
            let sq: f64 = selected
                .iter()
                .flat_map(|k| self.params[k].grad.as_ref().unwrap().data())
                .map(|g| {
                    let g = g.to_f64().unwrap_or(0.0);
                    g * g
                })
                .sum();
            let norm = sq.sqrt();
            if norm > max {
                scale = T::lit(max / norm);
            }
        }
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
        for k in selected {
            let p = self.params.get_mut(&k).unwrap();
            let grad = p.grad.take().unwrap();
            p.step += 1;
            let t = p.step as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            for (((w, m), v), &g) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.m.iter_mut())
                .zip(p.v.iter_mut())
                .zip(grad.data())
            {
                let g = g * scale;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
