use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    /// Optimizer may update this tensor. Buffers of a trainable module are
    /// refreshed by training-mode forwards instead.
    pub trainable: bool,
    /// Running statistic rather than a learned weight.
    pub buffer: bool,
}

/// Named tensors in insertion order with unique names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, buffer: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config("params", format!("duplicate tensor name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.names.push(name);
        self.params.push(Param {
            value,
            trainable: true,
            buffer,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    /// Panics when `name` is absent; model code only asks for tensors it created.
    pub fn get(&self, name: &str) -> &Tensor<T> {
        match self.index.get(name) {
            Some(&i) => &self.params[i].value,
            None => panic!("parameter {name} not in store"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        match self.index.get(name) {
            Some(&i) => &mut self.params[i].value,
            None => panic!("parameter {name} not in store"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.names.iter().map(String::as_str).zip(self.params.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.names.iter().map(String::as_str).zip(self.params.iter_mut())
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.names.iter().zip(self.params.iter_mut()) {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn is_trainable(&self, prefix: &str) -> bool {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .all(|(_, p)| p.trainable)
    }

    /// Copies every tensor of `other` into this store, failing on name clashes.
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (name, p) in other.names.into_iter().zip(other.params) {
            let trainable = p.trainable;
            self.insert(name.clone(), p.value, p.buffer)?;
            self.params.last_mut().unwrap().trainable = trainable;
        }
        Ok(())
    }

    /// Sub-store with the tensors whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, p) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(name, p.value.clone(), p.buffer).unwrap();
            out.params.last_mut().unwrap().trainable = p.trainable;
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, p) in self.iter() {
            out.insert(name, p.value.cast(), p.buffer).unwrap();
            out.params.last_mut().unwrap().trainable = p.trainable;
        }
        out
    }
}

/// Gradient accumulator keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Grads<T> {
    map: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new() -> Self {
        Grads {
            map: HashMap::new(),
        }
    }

    pub fn accumulate(&mut self, name: &str, grad: Tensor<T>) {
        match self.map.get_mut(name) {
            Some(g) => g.add_assign(&grad),
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn merge(&mut self, other: Grads<T>) {
        for (name, g) in other.map {
            self.accumulate(&name, g);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.map.values_mut() {
            g.scale(s);
        }
    }

    /// Global L2 norm over the gradients of trainable tensors, in store order.
    pub fn norm(&self, params: &ParamStore<T>) -> T {
        let mut acc = T::zero();
        for (name, p) in params.iter() {
            if p.trainable && !p.buffer {
                if let Some(g) = self.map.get(name) {
                    acc += g.sq_norm();
                }
            }
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }
}

/// He-normal initialisation for a fan-in of `fan_in` inputs.
pub fn he_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::c(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[1]), false).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1]), false).is_err());
    }

    #[test]
    fn set_trainable_by_prefix() {
        let mut s = ParamStore::<f32>::new();
        s.insert("det.w", Tensor::zeros(&[1]), false).unwrap();
        s.insert("aux.w", Tensor::zeros(&[1]), false).unwrap();
        s.set_trainable("det.", false);
        assert!(!s.param("det.w").unwrap().trainable);
        assert!(s.param("aux.w").unwrap().trainable);
        assert!(!s.is_trainable("det."));
    }
}
