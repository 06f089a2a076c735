//! Dense f64 tensors, a tape-based reverse-mode differentiation graph and
//! the Adam optimizer.
//!
//! Values live in [`Tensor`]. Learnable state lives in a [`ParamStore`] and is
//! copied onto a [`Tape`] when a graph is built; [`Tape::backward`] consumes the
//! tape and returns [`Gradients`] which the store accumulates.

mod adam;
mod gradcheck;
pub mod linalg;
mod ops;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::gradient_check;
pub use params::{Group, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Row-major array of 64-bit floats. A scalar has an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Slice `[start, start+len)` along axis 0.
    pub fn rows(&self, start: usize, len: usize) -> Result<Self> {
        let n0 = *self.shape.first().unwrap_or(&1);
        if self.shape.is_empty() || start + len > n0 || len == 0 {
            return Err(Error::InvalidShape {
                op: "rows",
                shape: self.shape.clone(),
                reason: format!("rows {start}..{} out of range", start + len),
            });
        }
        let inner = self.data.len() / n0;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self {
            shape,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        })
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::InvalidShape {
            op: "stack",
            shape: vec![],
            reason: "nothing to stack".into(),
        })?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Split along axis 0 into single items with the leading axis removed.
    pub fn unstack(&self) -> Vec<Tensor> {
        let n0 = self.shape.first().copied().unwrap_or(1);
        let inner = self.data.len() / n0;
        let shape = self.shape[1..].to_vec();
        self.data
            .chunks(inner)
            .map(|c| Tensor {
                shape: shape.clone(),
                data: c.to_vec(),
            })
            .collect()
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}
