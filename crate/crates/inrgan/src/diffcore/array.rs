//! Dense n-dimensional arrays over a configurable float precision.
//!
//! `NdArray` is the universal value currency of the compute graph: flat
//! row-major storage plus a shape vector. All kernels operate on these.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt;

/// Element dtype code, used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

/// Floating-point element type of the compute graph.
///
/// Training defaults to `f32`; gradient checking requires `f64`.
pub trait Scalar:
    num_traits::Float
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Dense row-major array. `data.len()` always equals the product of `shape`.
#[derive(Clone, PartialEq)]
pub struct NdArray<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> NdArray<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "NdArray::new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(NdArray { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        NdArray {
            shape,
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel = shape.iter().product();
        NdArray {
            shape,
            data: vec![value; numel],
        }
    }

    /// Rank-0 array holding a single value.
    pub fn scalar(value: F) -> Self {
        NdArray {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Normal(0, std) samples drawn in row-major order from `rng`.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let n: f64 = rng.sample(StandardNormal);
                F::from_f64(n * std)
            })
            .collect();
        NdArray { shape, data }
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

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a rank-0 or single-element array.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Same data, different shape; element count must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(NdArray {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Cast the element type, e.g. for checkpoint serialization.
    pub fn cast<G: Scalar>(&self) -> NdArray<G> {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_f64(v.to_f64())).collect(),
        }
    }
}

impl<F: Scalar> fmt::Debug for NdArray<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "NdArray{:?} {:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "NdArray{:?} [{} elements, first {:?}]",
                self.shape,
                self.data.len(),
                &self.data[..4]
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn new_rejects_bad_length() {
        let err = NdArray::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = NdArray::scalar(3.5f64);
        assert!(s.shape().is_empty());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = NdArray::<f32>::randn(vec![16], 0.5, &mut a);
        let y = NdArray::<f32>::randn(vec![16], 0.5, &mut b);
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn cast_roundtrip_f32() {
        let x = NdArray::<f32>::new(vec![3], vec![1.0, -2.5, 0.125]).unwrap();
        let y: NdArray<f64> = x.cast();
        let z: NdArray<f32> = y.cast();
        assert_eq!(x.data(), z.data());
    }
}
