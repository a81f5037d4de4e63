use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Tensor,
}

/// Named trainable tensors with a gradient buffer of identical shape each.
///
/// Iteration order is the lexical order of names, which the checkpoint
/// format and every optimizer step rely on for determinism.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.dims());
        self.slots.insert(name, Slot { value, grad });
        Ok(())
    }

    /// Fan-in scaled uniform init in `±sqrt(6 / fan_in)`, for layers
    /// followed by a ReLU.
    pub fn insert_kaiming<R: Rng>(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.insert_fan_in(name, dims, fan_in, std::f64::consts::SQRT_2, rng)
    }

    /// Uniform init with variance `gain² / fan_in`.
    pub fn insert_fan_in<R: Rng>(
        &mut self,
        name: impl Into<String>,
        dims: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<()> {
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(dims.to_vec(), data)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.grad)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    /// Replace a weight; the new value must keep the registered shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if slot.value.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has dims {:?}, got {:?}",
                slot.value.dims(),
                value.dims()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, delta: &[f64]) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if slot.grad.len() != delta.len() {
            return Err(Error::Shape(format!("gradient for `{name}` has wrong length")));
        }
        for (g, d) in slot.grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.data_mut().fill(0.0);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.slots
            .values()
            .all(|s| s.grad.data().iter().all(|v| v.is_finite()))
    }

    /// Euclidean norm of all gradients together.
    pub fn grad_norm(&self) -> f64 {
        self.slots
            .values()
            .map(|s| s.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale the gradients so their joint norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let k = max_norm / norm;
            for slot in self.slots.values_mut() {
                slot.grad.data_mut().iter_mut().for_each(|g| *g *= k);
            }
        }
        norm
    }

    /// `w ← w − lr·g` for every parameter, then clear the gradients.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        if !self.grads_finite() {
            return Err(Error::Numeric("non-finite gradient before SGD step".into()));
        }
        for (name, slot) in &mut self.slots {
            for (w, g) in slot.value.data_mut().iter_mut().zip(slot.grad.data()) {
                *w -= lr * g;
            }
            if slot.value.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("parameter `{name}` diverged")));
            }
            slot.grad.data_mut().fill(0.0);
        }
        Ok(())
    }
}
