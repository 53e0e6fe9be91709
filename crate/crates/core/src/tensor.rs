//! Dense row-major tensor. The only storage type in the engine; every
//! construction and drop is reported to the allocation gauge in `mem`.

use crate::error::{Error, Result};
use crate::mem;
use crate::scalar::Scalar;

#[derive(Debug)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Invariant: data length equals the product of the shape dimensions and
    /// every dimension is positive.
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {numel} elements, data has {}",
                data.len()
            )));
        }
        mem::add_allocation(data.len() * std::mem::size_of::<F>());
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::ZERO)
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let numel: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        mem::add_allocation(numel * std::mem::size_of::<F>());
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: F) -> Self {
        Self::full(&[1], v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Single-element tensors act as scalars (losses, schedule values).
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<F> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same data, new shape with identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::from_vec(self.shape.clone(), data).expect("same shape")
    }

    pub fn zip_map(&self, other: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_vec(self.shape.clone(), data)
    }

    pub fn scale(&self, c: F) -> Self {
        self.map(|v| v * c)
    }

    /// In-place axpy: self += c * other. Shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor<F>, c: F) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add_scaled on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn convert<G: Scalar>(&self) -> Tensor<G> {
        let data = self.data.iter().map(|&v| G::from_f64(v.to_f64())).collect();
        Tensor::from_vec(self.shape.clone(), data).expect("same shape")
    }
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        mem::add_allocation(self.data.len() * std::mem::size_of::<F>());
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }
}

impl<F: Scalar> Drop for Tensor<F> {
    fn drop(&mut self) {
        mem::remove_allocation(self.data.len() * std::mem::size_of::<F>());
    }
}
