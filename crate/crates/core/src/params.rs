//! Named parameter storage, initialization and graph binding.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Real, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    /// Whether decoupled weight decay applies (false for biases and norms).
    pub decay: bool,
}

/// Ordered map of parameter name to tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) {
        self.entries.insert(name.into(), Param { tensor, decay });
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Count restricted to names starting with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// Drop every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    /// Insert all of `other`, replacing same-named entries.
    pub fn extend(&mut self, other: ParamStore<T>) {
        self.entries.extend(other.entries);
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            decay: p.decay,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Euclidean distance between same-named parameters under `prefix`.
    pub fn distance(&self, other: &ParamStore<T>, prefix: &str) -> f64 {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .filter_map(|(k, p)| other.entries.get(k).map(|q| (p, q)))
            .map(|(p, q)| {
                p.tensor
                    .data()
                    .iter()
                    .zip(q.tensor.data())
                    .map(|(a, b)| {
                        let d = (*a - *b).to_f64().unwrap_or(f64::NAN);
                        d * d
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Draws initial values. Weights are normal with `std`, truncated at two
/// standard deviations.
pub struct Initializer<R> {
    rng: R,
    normal: Normal<f64>,
}

impl<R: Rng> Initializer<R> {
    pub fn new(rng: R) -> Self {
        Initializer {
            rng,
            normal: Normal::new(0.0, 1.0).expect("valid normal"),
        }
    }

    pub fn trunc_normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z = self.normal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break T::of(z * std);
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    /// `name.weight` (truncated normal, decayed) and `name.bias` (zeros).
    pub fn linear<T: Real>(&mut self, store: &mut ParamStore<T>, name: &str, inputs: usize, outputs: usize) {
        store.insert(
            format!("{name}.weight"),
            self.trunc_normal(&[inputs, outputs], INIT_STD),
            true,
        );
        store.insert(format!("{name}.bias"), Tensor::zeros(&[outputs]), false);
    }

    /// `name.gain` (ones) and `name.bias` (zeros), neither decayed.
    pub fn layer_norm<T: Real>(&mut self, store: &mut ParamStore<T>, name: &str, dim: usize) {
        store.insert(format!("{name}.gain"), Tensor::full(&[dim], T::one()), false);
        store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]), false);
    }
}

/// Parameters bound as leaves of one graph, created on first use so that
/// parameters a step never touches receive no gradient at all.
pub struct Binding<'a, T> {
    store: Option<&'a ParamStore<T>>,
    vars: BTreeMap<String, Var>,
}

impl<'a, T: Real> Binding<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Binding {
            store: Some(store),
            vars: BTreeMap::new(),
        }
    }

    /// Binding over leaves that were already created by the caller.
    pub fn prebound(vars: BTreeMap<String, Var>) -> Self {
        Binding { store: None, vars }
    }

    pub fn get(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let store = self.store.ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = g.param(store.get(name)?.tensor.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Move the gradients of every bound parameter out of `grads`.
    pub fn collect(&self, grads: &mut Gradients<T>) -> ParamGrads<T> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|t| (k.clone(), t)))
            .collect()
    }
}
