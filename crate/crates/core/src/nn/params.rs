use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::nn::Tensor;

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_SET_ID.fetch_add(1, Ordering::Relaxed)
}

/// A named tensor plus its accumulated gradient.
///
/// Non-trainable entries (BatchNorm running statistics) live alongside the
/// trainable ones so that checkpoints, Polyak averaging and parameter counts
/// see every stored value.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }
}

/// Ordered parameter collection owned by one network.
///
/// Every set carries a process-unique id that tapes use to route gradients
/// back to the right owner; clones receive a fresh id.
#[derive(Debug)]
pub struct ParamSet {
    id: u64,
    params: Vec<Parameter>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self {
            id: next_id(),
            params: self.params.clone(),
        }
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            id: next_id(),
            params: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Registers a parameter and returns its index. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::State(format!("duplicate parameter name {name}")));
        }
        self.params.push(Parameter::new(name, value, trainable));
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total stored scalars, trainable or not.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// All values concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            out.extend_from_slice(p.grad.data());
        }
        out
    }

    /// Overwrites all values from a flat vector produced by [`ParamSet::flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return shape_err(format!(
                "flat vector of {} values for a set of {}",
                flat.len(),
                self.numel()
            ));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Copies values from a structurally identical set.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        self.check_congruent(other)?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    pub(crate) fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.params.len() != other.params.len() {
            return shape_err(format!(
                "parameter sets differ in length: {} vs {}",
                self.params.len(),
                other.params.len()
            ));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.value.shape() != b.value.shape() {
                return shape_err(format!(
                    "parameter {} has shape {:?}, counterpart {} has {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                ));
            }
        }
        Ok(())
    }

    /// Renames every parameter with a prefix (used when nesting networks in a checkpoint).
    pub fn prefixed_names(&self, prefix: &str) -> Vec<String> {
        self.params
            .iter()
            .map(|p| format!("{prefix}.{}", p.name))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamSet::new();
        s.add("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(s.add("w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn clone_gets_fresh_id() {
        let s = ParamSet::new();
        assert_ne!(s.id(), s.clone().id());
    }

    #[test]
    fn flatten_load_roundtrip() {
        let mut s = ParamSet::new();
        s.add("a", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        s.add("b", Tensor::vector(vec![3.0]), false).unwrap();
        let flat = s.flatten();
        let mut t = s.clone();
        t.get_mut(0).value.data_mut()[0] = 9.0;
        t.load_flat(&flat).unwrap();
        assert_eq!(t.flatten(), vec![1.0, 2.0, 3.0]);
        assert!(t.load_flat(&[1.0]).is_err());
    }
}
