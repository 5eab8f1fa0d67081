use sha2::{Digest, Sha256};

use crate::diffcore::{Graph, NamedTensor, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Puts every tensor on the graph, as trainable leaves or constants.
    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Vec<Var<'g, T>> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn to_named(&self, prefix: &str) -> Vec<NamedTensor<T>> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    /// Replaces every tensor by the entry named `prefix + name`; shapes must agree.
    pub fn load_named(&mut self, prefix: &str, entries: &[NamedTensor<T>]) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let full = format!("{prefix}{name}");
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == full)
                .ok_or_else(|| Error::Data(format!("missing parameter {full}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Data(format!(
                    "parameter {full}: shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Copies values from a store with identical layout.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Data("parameter layouts differ".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::Data("parameter shapes differ".into()));
            }
            *a = b.clone();
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the binary64 bits of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f64_lossless().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Weight matrix `[fan_in x fan_out]` drawn from N(0, 1/fan_in).
pub(crate) fn lecun_normal<T: Scalar>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let std = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn([fan_in, fan_out], |_| T::from_f64_lossy(rng.normal() * std))
}

/// Std of every weight that writes into the residual stream (patch
/// embedding, class token, positions, attention and MLP output projections).
/// Inputs to attention and the MLP are normalized, so this sets the token
/// scale of the whole network.
pub const RESIDUAL_STD: f64 = 0.02;

pub(crate) fn normal<T: Scalar>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.normal() * std))
}
