use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major `f64` array.
///
/// A tensor with an empty shape is a scalar holding one value. Leaf tensors
/// registered as graph parameters carry `requires_grad = true` and an
/// accumulated gradient buffer of the same length as `data`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        assert!(n > 0, "empty vector tensor");
        Self {
            shape: vec![n],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
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

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len());
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in g.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let offset: usize = index.iter().zip(self.strides()).map(|(&i, s)| i * s).sum();
        self.data[offset]
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        } else {
            s.field("data", &format_args!("[{} values]", self.data.len()));
        }
        if self.requires_grad {
            s.field("requires_grad", &true);
        }
        s.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_length() {
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new([2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let t = Tensor::scalar(3.5);
        assert!(t.shape().is_empty());
        assert!(t.is_scalar());
        assert_eq!(t.item(), 3.5);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad(true);
        t.accumulate_grad(&[1.0, 1.0]);
        t.accumulate_grad(&[0.5, -1.0]);
        assert_eq!(t.grad(), Some(&[1.5, 0.0][..]));
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new([2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.strides(), vec![3, 1]);
    }
}
