//! Dense row-major arrays, the define-by-run gradient graph and the TNSR
//! file format.
//!
//! [`Tensor`] is the storage type: 32-bit values with shape metadata and an
//! optional gradient buffer. All arithmetic, including the eager helpers on
//! `Tensor`, runs in 64-bit through the shared kernels and the [`Graph`].

mod graph;
pub mod gradcheck;
mod io;
pub(crate) mod kernels;

pub use graph::{Fault, Gradients, Graph, Var};
pub(crate) use graph::column_stats;
pub use io::{read_tnsr, read_tnsr_from, write_tnsr, write_tnsr_to, TNSR_MAGIC};

use crate::error::{Error, Result};

/// Guard below which a vector is considered to have no direction.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Parameter(format!(
            "shape must be a non-empty list of positive dimensions, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new([data.len()], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::dim("accumulate_grad", &self.shape, &[delta.len()]));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = (*g as f64 + d) as f32;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            grad: None,
            requires_grad: self.requires_grad,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new([n, m], out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let out = kernels::matmul(&self.to_f64(), &other.to_f64(), m, k, n);
        Tensor::from_f64([m, n], &out)
    }

    /// Softmax of `self / temperature` along `axis`.
    pub fn softmax(&self, axis: usize, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        if axis >= self.shape.len() {
            return Err(Error::Parameter(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        let out = kernels::softmax(&self.to_f64(), &self.shape, axis, temperature);
        Tensor::from_f64(self.shape.clone(), &out)
    }

    pub fn l2_norm(&self) -> f64 {
        kernels::l2_norm(&self.to_f64())
    }

    /// Unit-length copy. Refuses vectors whose norm is at or below [`NORM_EPS`].
    pub fn normalize(&self) -> Result<Self> {
        let values = self.to_f64();
        let norm = kernels::l2_norm(&values);
        if norm <= NORM_EPS {
            return Err(Error::Degenerate(format!(
                "cannot normalize a vector of norm {norm:e}"
            )));
        }
        let out: Vec<f64> = values.iter().map(|v| v / norm).collect();
        Tensor::from_f64(self.shape.clone(), &out)
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            other => Err(Error::dim(op, other, &[0, 0])),
        }
    }
}
