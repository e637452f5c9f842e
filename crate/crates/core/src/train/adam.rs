//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at rate `lr`. Parameters without a gradient are left
    /// alone; decay applies only to parameters marked for it.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        let next = self.step + 1;
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.tensor.shape() != g.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("`{name}` is {:?}, gradient {:?}", p.tensor.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    name: name.clone(),
                    step: next,
                });
            }
        }
        self.step = next;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let step_size = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let decay = if p.decay {
                T::of(lr * self.weight_decay)
            } else {
                T::zero()
            };
            for (((w, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = tb1 * *mi + one_b1 * gi;
                *vi = tb2 * *vi + one_b2 * gi * gi;
                let denom = (*vi * inv_c2).sqrt() + eps;
                *w = *w - decay * *w - step_size * *mi / denom;
            }
        }
        Ok(())
    }
}
