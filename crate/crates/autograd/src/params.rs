use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::matrix::{Matrix, Shape};

/// A trainable array: values plus a same-shaped gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub values: Matrix,
    pub grad: Vec<f64>,
}

impl Tensor {
    pub fn new(values: Matrix) -> Self {
        let grad = vec![0.0; values.data.len()];
        Tensor { values, grad }
    }

    pub fn shape(&self) -> Shape {
        self.values.shape
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identity of a store inside a trace, so that leaves from several models
/// can coexist and be routed back to the right gradient buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StoreId(u64);

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

impl StoreId {
    fn fresh() -> Self {
        StoreId(NEXT_STORE.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    /// Row whose values stay pinned (embedding padding row).
    pub pinned_row: Option<usize>,
}

/// Named parameter collection for one model.
///
/// A frozen store still contributes values to a trace, but its leaves never
/// require gradients, so its buffers stay identically zero.
#[derive(Debug)]
pub struct ParamStore {
    id: StoreId,
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
    frozen: bool,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            id: StoreId::fresh(),
            params: self.params.clone(),
            by_name: self.by_name.clone(),
            frozen: self.frozen,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Uniform in `[-limit, limit]`.
    Uniform(f64),
    /// Glorot-uniform using the matrix fan-in/fan-out.
    Glorot,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: StoreId::fresh(),
            params: Vec::new(),
            by_name: BTreeMap::new(),
            frozen: false,
        }
    }

    pub fn id(&self) -> StoreId {
        self.id
    }

    /// Copy that keeps this store's id, so a trace built over the copy
    /// accumulates into the original.
    pub fn alias(&self) -> Self {
        ParamStore {
            id: self.id,
            ..self.clone()
        }
    }

    pub fn add(&mut self, name: &str, values: Matrix) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            tensor: Tensor::new(values),
            trainable: true,
            pinned_row: None,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn add_init<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let mut m = Matrix::zeros(rows, cols);
        let limit = match init {
            Init::Zeros => 0.0,
            Init::Uniform(l) => l,
            Init::Glorot => (6.0 / (rows + cols) as f64).sqrt(),
        };
        if limit > 0.0 {
            for v in m.data.iter_mut() {
                *v = rng.random_range(-limit..=limit);
            }
        }
        self.add(name, m)
    }

    pub fn pin_row(&mut self, id: ParamId, row: usize) {
        let p = &mut self.params[id.0];
        let cols = p.tensor.values.cols();
        p.tensor.values.data[row * cols..(row + 1) * cols]
            .iter_mut()
            .for_each(|v| *v = 0.0);
        p.pinned_row = Some(row);
    }

    pub fn lookup(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].tensor.values
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].tensor.values
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].tensor.grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.values.data.len()).sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut() {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.params.iter_mut() {
            p.trainable = trainable;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.iter_mut() {
            p.tensor.zero_grad();
        }
    }

    pub fn grads_all_zero(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.tensor.grad.iter().all(|g| *g == 0.0))
    }

    /// Global L2 norm of the gradients of trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.tensor.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Copies values from `other` for every parameter name both stores share
    /// with identical shapes. Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in self.params.iter_mut() {
            if let Some(id) = other.by_name.get(&p.name) {
                let src = &other.params[id.0].tensor.values;
                if src.shape == p.tensor.values.shape {
                    p.tensor.values = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update((p.tensor.values.rows() as u64).to_le_bytes());
            h.update((p.tensor.values.cols() as u64).to_le_bytes());
            for v in &p.tensor.values.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Matrix, Trace};

    #[test]
    fn clone_is_independent_alias_is_not() {
        let mut s = ParamStore::new();
        let w = s.add("w", Matrix::row_vector(vec![2.0]));
        assert_ne!(s.clone().id(), s.id());
        let view = s.alias();
        assert_eq!(view.id(), s.id());
        let mut t = Trace::new();
        let v = t.param(&view, w);
        let y = t.mul(v, v).unwrap();
        let loss = t.sum(y);
        t.backward_into(loss, &mut [&mut s]).unwrap();
        assert_eq!(s.grad(w), &[4.0]);
    }
}
