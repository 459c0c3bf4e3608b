use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Element, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered table of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Record every tensor on the tape. Names for which `trainable` is false
    /// become constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.param(name.clone(), t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Gradients aligned with this set's order; zeros where none flowed.
    pub fn collect_grads(&self, binds: &Bindings, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .map(|(name, t)| {
                binds
                    .vars
                    .get(name)
                    .and_then(|&v| grads.take_raw(v))
                    .map(|g| Tensor::new(t.shape(), g).expect("gradient shape"))
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

/// Name → tape handle for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter `{name}` is not bound")))
    }
}

impl<S: Into<String>> FromIterator<(S, Var)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (S, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }
}

/// Normal init with the given standard deviation.
pub fn normal<T: Element>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![T::zero(); n]
    } else {
        let dist = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| T::of(dist.sample(rng))).collect()
    };
    Tensor::new(shape, data).expect("numel")
}

/// Glorot-normal init for a `fan_in → fan_out` map.
pub fn glorot<T: Element>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal(shape, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

/// He-normal init for a relu layer with `fan_in` inputs.
pub fn he<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}
