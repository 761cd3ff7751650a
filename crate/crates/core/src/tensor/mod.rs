//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! Parameters live in a [`ParamStore`] as gradient-carrying [`Tensor`]s. Each
//! forward pass builds a fresh [`Graph`] that copies the parameters it needs
//! into leaf nodes; after [`Graph::backward`] the leaf gradients are added
//! back into the store with [`Graph::accumulate_grads`].

mod graph;
mod gradcheck;

pub use graph::{Gradients, Graph, Var};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Smallest probability any softmax output may take.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Turns on gradient tracking with a zeroed buffer.
    pub fn requiring_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Splits the borrow so an optimizer can read the gradient while writing values.
    pub fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }
}

/// Ordered collection of named, gradient-carrying parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let tensor = if tensor.requires_grad() {
            tensor
        } else {
            tensor.requiring_grad()
        };
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces all values with those of `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract(format!(
                "parameter names differ: {:?} vs {:?}",
                self.names, other.names
            )));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape != b.shape {
                return Err(Error::Contract(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i], b.shape, a.shape
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
