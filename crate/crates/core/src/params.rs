//! Named parameter tables and initializers.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Ordered table of named trainable tensors.
///
/// Insertion order is the model's construction order and is preserved
/// through checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    tensors: IndexMap<String, Tensor<F>>,
}

/// Equal when names, order, shapes and values all agree.
impl<F: Real> PartialEq for ParamStore<F> {
    fn eq(&self, other: &Self) -> bool {
        self.len() == other.len() && self.iter().zip(other.iter()).all(|(a, b)| a == b)
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { tensors: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total number of stored scalar values.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Sum of element counts for every parameter whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.numel()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Replaces every tensor with the same-named entry of `other`, checking
    /// that names and shapes agree exactly.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => problems.push(format!("{name} (missing)")),
                Some(o) if o.shape() != t.shape() => {
                    problems.push(format!("{name} (expected {:?}, found {:?})", t.shape(), o.shape()))
                }
                Some(_) => {}
            }
        }
        for name in other.tensors.keys() {
            if !self.tensors.contains_key(name) {
                problems.push(format!("{name} (unexpected)"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointMismatch(problems.join(", ")));
        }
        for (name, t) in self.tensors.iter_mut() {
            *t = other.tensors[name].clone();
        }
        Ok(())
    }
}

/// Uniform in `[-bound, bound)`.
pub fn uniform<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| F::c(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Default fan-in scaled uniform init, `bound = 1/sqrt(fan_in)`.
pub fn fan_in_uniform<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    uniform(rng, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
}
