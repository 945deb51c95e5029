use serde::{Deserialize, Serialize};

use super::real::Real;
use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} holds {numel} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but panics on mismatch; for internal call sites
    /// whose extents are correct by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::ZERO)
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// I.i.d. normal entries with standard deviation `std`.
    pub fn randn(rng: &mut super::rng::Rng, shape: &[usize], std: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(|_| F::of(rng.normal() * std)).collect() }
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| G::of(v.as_f64())).collect() }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> F {
        self.sum() / F::of(self.data.len() as f64)
    }

    /// Slice along the leading axis: items `start..end`.
    pub fn slice_outer(&self, start: usize, end: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self { shape, data: self.data[start * inner..end * inner].to_vec() }
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("stack of nothing".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!("stack: {:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents_must_match() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn stack_and_slice() {
        let a = Tensor::<f64>::full(&[2], 1.0);
        let b = Tensor::<f64>::full(&[2], 2.0);
        let s = Tensor::stack(&[a, b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.slice_outer(1, 2).reshape(&[2]).unwrap(), b);
    }
}
