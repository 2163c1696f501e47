//! Named parameter storage.
//!
//! Parameters live outside any tape; each forward pass binds them as
//! `requires_grad` leaves and reads gradients back out after `backward`.
//! Entry order is insertion order and defines the checkpoint layout.

use std::collections::HashMap;

use crate::rng::standard_normal;
use crate::tensor::{Tape, TensorError, TensorId};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name}: shape/data mismatch"
        );
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
    }

    /// Xavier-uniform weight matrix `[fan_in, fan_out]`.
    pub fn insert_linear_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        self.insert(name, &[fan_in, fan_out], data);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        let n = shape.iter().product();
        self.insert(name, shape, vec![0.0; n]);
    }

    pub fn insert_ones(&mut self, name: &str, shape: &[usize]) {
        let n = shape.iter().product();
        self.insert(name, shape, vec![1.0; n]);
    }

    /// Unit-normal embedding table `[rows, dim]`.
    pub fn insert_embedding(&mut self, name: &str, rows: usize, dim: usize, rng: &mut impl Rng) {
        let data = (0..rows * dim).map(|_| standard_normal(rng)).collect();
        self.insert(name, &[rows, dim], data);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    pub fn entry(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut Param {
        &mut self.entries[i]
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.data.len()).sum()
    }

    /// Bind every parameter onto `tape`. With `trainable`, leaves require
    /// grad and a later [`BoundParams::collect_grads`] reads them back.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|p| {
                tape.leaf(p.data.clone(), &p.shape, trainable)
                    .expect("stored parameter shapes are valid")
            })
            .collect();
        BoundParams { ids }
    }
}

/// Tape ids of bound parameters, parallel to `ParamStore::entries`.
pub struct BoundParams {
    ids: Vec<TensorId>,
}

impl BoundParams {
    pub fn id(&self, store: &ParamStore, name: &str) -> TensorId {
        let i = store
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[*i]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }

    /// Gradient buffers after a backward pass, parallel to the store.
    pub fn collect_grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()))
            .collect()
    }
}

/// Convenience for binding and looking up by name in model code.
pub struct ParamBinder<'a> {
    pub store: &'a ParamStore,
    pub bound: BoundParams,
}

impl<'a> ParamBinder<'a> {
    pub fn new(store: &'a ParamStore, tape: &mut Tape, trainable: bool) -> Self {
        let bound = store.bind(tape, trainable);
        ParamBinder { store, bound }
    }

    pub fn id(&self, name: &str) -> TensorId {
        self.bound.id(self.store, name)
    }
}

/// `x @ w + b` with parameters resolved by name.
pub fn linear(
    tape: &mut Tape,
    binder: &ParamBinder,
    x: TensorId,
    weight: &str,
    bias: &str,
) -> Result<TensorId, TensorError> {
    let w = binder.id(weight);
    let b = binder.id(bias);
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, b)
}
