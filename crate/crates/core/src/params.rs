//! Flat registry of trainable parameters.
//!
//! Layers hold [`ParamId`] handles; the tensors themselves live here, in
//! registration order. That fixed order is what makes initialization, Adam
//! updates, gradient extraction and checkpoints deterministic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{GradTape, Gradients, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix with uniform Xavier bounds ±√(6/(fan_in+fan_out)).
    pub fn xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.register(name, Tensor::new(vec![rows, cols], data).expect("xavier shape"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.register(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.register(name, Tensor::filled(shape, 1.0))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor) {
        assert_eq!(
            self.tensors[id.0].shape(),
            tensor.shape(),
            "parameter {} shape changed",
            self.names[id.0]
        );
        self.tensors[id.0] = tensor;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a leaf on `tape`, in id order. Done once
    /// per forward pass so parallel regions share a single leaf per
    /// parameter.
    pub fn leaf_all(&self, tape: &mut GradTape) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), true))
                .collect(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf `Var`s of every parameter for one forward pass.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn var(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    /// Per-parameter gradients in id order, zeros where nothing flowed.
    pub fn grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars.iter().map(|v| grads.of_or_zeros(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn xavier_respects_bounds_and_seed() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = store.xavier("w", 3, 5, &mut rng);
        let bound = (6.0 / 8.0f64).sqrt();
        assert!(store.get(id).data().iter().all(|v| v.abs() <= bound));

        let mut store2 = ParamStore::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let id2 = store2.xavier("w", 3, 5, &mut rng2);
        assert!(store.get(id).bit_eq(store2.get(id2)));
    }

    #[test]
    fn total_scalars_counts_all() {
        let mut store = ParamStore::new();
        store.zeros("a", vec![2, 3]);
        store.ones("b", vec![4]);
        assert_eq!(store.total_scalars(), 10);
    }
}
