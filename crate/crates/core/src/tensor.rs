//! Dense real-valued arrays with explicit shape, the numeric carrier for
//! inputs, parameters and gradients.

use crate::error::{Error, Result};

/// A dense tensor of `f32` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data. The element count must
    /// match the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InputShape {
                expected: "all dimensions positive".into(),
                got: format!("{shape:?}"),
            });
        }
        if expected != data.len() {
            return Err(Error::InputShape {
                expected: format!("{expected} elements for shape {shape:?}"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// True when every element is finite (no NaN/Inf).
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {context}")))
        }
    }

    /// Reinterpret the tensor with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Clamp every element into `[lo, hi]` in place.
    pub fn clamp_in_place(&mut self, lo: f32, hi: f32) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }
}
