//! Named parameter storage with paired gradient buffers and Adam state.

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, NodeId};
use crate::tensor::{Element, Shape5, Tensor5};
use indexmap::IndexMap;

pub struct ParamEntry<E: Element> {
    pub shape: Shape5,
    pub value: Vec<E>,
    pub grad: Vec<E>,
    pub adam_m: Vec<E>,
    pub adam_v: Vec<E>,
    /// Non-trainable entries are buffers (normalization running statistics):
    /// checkpointed but never counted or updated by the optimizer.
    pub trainable: bool,
}

/// Insertion-ordered map of named learnable arrays. Exclusively owned by the
/// training loop; the forward pass reads values and records bindings so the
/// reverse pass can write gradients back by name.
pub struct ParamStore<E: Element> {
    entries: IndexMap<String, ParamEntry<E>>,
    step: u64,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, shape: Shape5, value: Vec<E>, trainable: bool) {
        assert_eq!(shape.numel(), value.len(), "param {name} shape/data mismatch");
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter name {name}"
        );
        let n = value.len();
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                shape,
                value,
                grad: vec![E::zero(); n],
                adam_m: vec![E::zero(); n],
                adam_v: vec![E::zero(); n],
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<E>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<E>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<E>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor5<E>> {
        let e = self.get(name)?;
        Ok(Tensor5::new(e.shape, e.value.clone()))
    }

    /// Insert the parameter into a graph as a leaf and record the binding.
    pub fn leaf(
        &self,
        g: &mut Graph<E>,
        bindings: &mut ParamBindings,
        name: &str,
    ) -> Result<NodeId> {
        let e = self.get(name)?;
        let id = g.leaf(Tensor5::new(e.shape, e.value.clone()), e.trainable);
        bindings.list.push((name.to_string(), id));
        Ok(id)
    }

    /// Total scalar count of trainable values.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(E::zero());
        }
    }

    /// Accumulate graph gradients into the store by binding name.
    pub fn accumulate(&mut self, grads: &Gradients<E>, bindings: &ParamBindings) -> Result<()> {
        for (name, id) in &bindings.list {
            let Some(g) = grads.get(*id) else { continue };
            let e = self.get_mut(name)?;
            for (slot, &v) in e.grad.iter_mut().zip(g.data()) {
                *slot += v;
            }
        }
        Ok(())
    }

    /// Classic Adam with bias correction; weight decay enters as an additive
    /// L2 term on the gradient before the moment updates.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (E::from_real(beta1), E::from_real(beta2));
        let (ob1, ob2) = (E::from_real(1.0 - beta1), E::from_real(1.0 - beta2));
        let wd = E::from_real(weight_decay);
        let lr_t = E::from_real(lr / bc1);
        let inv_sqrt_bc2 = E::from_real(1.0 / bc2.sqrt());
        let eps_e = E::from_real(eps);
        for e in self.entries.values_mut() {
            if !e.trainable {
                continue;
            }
            for i in 0..e.value.len() {
                let grad = e.grad[i] + wd * e.value[i];
                e.adam_m[i] = b1 * e.adam_m[i] + ob1 * grad;
                e.adam_v[i] = b2 * e.adam_v[i] + ob2 * grad * grad;
                let denom = e.adam_v[i].sqrt() * inv_sqrt_bc2 + eps_e;
                e.value[i] = e.value[i] - lr_t * e.adam_m[i] / denom;
            }
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Names and node ids of the parameters used by one forward pass.
#[derive(Default)]
pub struct ParamBindings {
    list: Vec<(String, NodeId)>,
}

impl ParamBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_of(&self, name: &str) -> Option<NodeId> {
        self.list
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.list.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("theta", Shape5::new(1, 1, 1, 1, 1), vec![v], true);
        s
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut s = scalar_store(1.5);
        s.adam_step(0.1, 0.9, 0.999, 1e-8, 0.0);
        assert_eq!(s.get("theta").unwrap().value[0], 1.5);
    }

    #[test]
    fn update_opposes_gradient_sign() {
        let mut s = scalar_store(1.0);
        s.get_mut("theta").unwrap().grad[0] = 2.0; // f = theta^2 at theta=1
        s.adam_step(0.1, 0.9, 0.999, 1e-8, 0.0);
        assert!(s.get("theta").unwrap().value[0] < 1.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = scalar_store(1.0);
        for _ in 0..200 {
            s.zero_grads();
            let theta = s.get("theta").unwrap().value[0];
            s.get_mut("theta").unwrap().grad[0] = 2.0 * theta;
            s.adam_step(0.1, 0.9, 0.999, 1e-8, 0.0);
        }
        assert!(s.get("theta").unwrap().value[0].abs() < 1e-3);
    }
}
