//! Trainable parameters and the Adam optimizer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a [`Parameter`] inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
}

/// Ordered collection of parameters. Insertion order is the canonical order
/// for checkpoints and parameter counts.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    /// Number of optimizer steps applied so far.
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        self.params[id.0].grad.add_assign(grad);
    }

    /// Overwrites a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::invalid(
                "set_value",
                format!("{}: shape {:?} != {:?}", p.name, value.shape(), p.value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Copies values of identically named and shaped parameters from `other`.
    /// Returns how many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = other.params.iter().find(|q| q.name == p.name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// as they are; call [`ParamStore::zero_grad`] before the next pass.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        store.step += 1;
        let t = store.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in &mut store.params {
            let grad = p.grad.data();
            let m = p.first_moment.data_mut();
            for (m, g) in m.iter_mut().zip(grad) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            }
            let v = p.second_moment.data_mut();
            for (v, g) in v.iter_mut().zip(grad) {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            }
            let (m, v) = (p.first_moment.data(), p.second_moment.data());
            for ((x, m), v) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                *x -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            }
            if !p.value.is_finite() {
                return Err(Error::Numeric(format!("parameter {} became non-finite", p.name)));
            }
        }
        Ok(())
    }
}
