//! Named learnable tensors with gradient buffers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.clone(),
            value,
            grad,
            trainable: true,
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

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds `grads` into the stored gradient buffers.
    pub fn accumulate(&mut self, grads: &GradSet) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    /// `value += alpha * grads`, in place.
    pub fn axpy(&mut self, alpha: f64, grads: &GradSet) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                for (v, d) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *v += alpha * d;
                }
            }
        }
    }
}

/// Per-parameter gradients from one backward pass, aligned with a store.
#[derive(Debug, Clone, Default)]
pub struct GradSet(pub(crate) Vec<Option<Tensor>>);

impl GradSet {
    pub fn empty(len: usize) -> Self {
        GradSet(vec![None; len])
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Inner product over parameters present in both sets.
    pub fn dot(&self, other: &GradSet) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .filter_map(|(a, b)| Some((a.as_ref()?, b.as_ref()?)))
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &GradSet) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            let Some(b) = b else { continue };
            match a {
                Some(a) => {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += alpha * y;
                    }
                }
                None => {
                    let mut t = b.clone();
                    t.data_mut().iter_mut().for_each(|x| *x *= alpha);
                    *a = Some(t);
                }
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

pub fn normal_init(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn gradset_dot_and_axpy() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let g = GradSet(vec![Some(Tensor::vector(vec![3.0, 4.0]))]);
        assert_eq!(g.dot(&g), 25.0);
        s.axpy(-1.0, &g);
        assert_eq!(s.value(a).data(), &[-2.0, -2.0]);
    }
}
