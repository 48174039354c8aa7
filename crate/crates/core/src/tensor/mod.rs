//! Dense `f64` tensors, a recording tape for reverse-mode differentiation,
//! and a central-difference gradient checker.

mod gradcheck;
pub mod kernels;
mod tape;

use rand::Rng;

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheck, DEFAULT_EPS};
pub use tape::{BinaryOp, Gradients, OpKind, Tape, Var};

pub const MAX_RANK: usize = 4;

/// Row-major dense array of rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::input(format!("tensor rank must be 1..=4, got shape {shape:?}")));
    }
    if shape.contains(&0) {
        return Err(Error::input(format!("zero-sized dimension in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if data.len() != len {
            return Err(Error::input(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: vec![value; len] })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Uniform samples in `[low, high)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = (0..len).map(|_| rng.gen_range(low..high)).collect();
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Tensor { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() })
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns `[N, C, H, W]`, failing for any other rank.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::input(format!("expected a rank-4 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(Error::input(format!("expected a rank-2 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::input(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Index of the largest value in each row of a `[N, K]` tensor.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let [n, k] = self.dims2()?;
        Ok((0..n)
            .map(|i| {
                let row = &self.data[i * k..(i + 1) * k];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Copies sample `index` of a batched tensor as a batch of one.
    pub fn batch_item(&self, index: usize) -> Result<Tensor> {
        let n = self.shape[0];
        if index >= n {
            return Err(Error::input(format!("batch index {index} out of range for {n}")));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(&shape, self.data[index * stride..(index + 1) * stride].to_vec())
    }

    /// Stacks equally shaped tensors along a new leading batch axis.
    ///
    /// Each item must have a leading dimension of 1, which is replaced.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::input("cannot stack an empty list"))?;
        if first.shape[0] != 1 {
            return Err(Error::input("stacked tensors must have a leading dimension of 1"));
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::input(format!(
                    "cannot stack shapes {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = items.len();
        Tensor::new(&shape, data)
    }
}
