use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngStream;

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor in a [`ParamStore`]. Handles from different stores never collide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u32,
    index: u32,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Named trainable tensors.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u32,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId {
            store: self.uid,
            index: (self.values.len() - 1) as u32,
        })
    }

    /// Adds a tensor drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
        self.add(name, Tensor::from_vec(shape, data)?)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    fn check(&self, id: ParamId) {
        assert_eq!(id.store, self.uid, "parameter handle from another store");
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        self.check(id);
        &self.values[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.check(id);
        &mut self.values[id.index()]
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.check(id);
        &self.names[id.index()]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(|i| ParamId {
            store: self.uid,
            index: i as u32,
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(|i| ParamId {
            store: self.uid,
            index: i as u32,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}
