//! Dense rank-1..4 tensors in batch-channel-height-width order.
//!
//! Values are held as `f64` regardless of dtype. An `F32` tensor rounds every
//! stored value to single precision, so the dtype is observable in the data
//! and in serialization without making every kernel generic.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("dtype", &self.dtype)
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank must be 1..={MAX_RANK}, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::shape(format!("zero extent in {dims:?}")));
    }
    Ok(dims.iter().product())
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>, dtype: DType) -> Result<Self> {
        let n = check_dims(dims)?;
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match dims {dims:?} ({n})",
                data.len()
            )));
        }
        let mut t = Tensor {
            dims: dims.to_vec(),
            dtype,
            data,
        };
        t.round_to_dtype();
        Ok(t)
    }

    /// f64 tensor; panics on invalid dims. Intended for literals in code and tests.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        Self::new(dims, data, DType::F64).expect("valid tensor literal")
    }

    pub fn zeros(dims: &[usize], dtype: DType) -> Result<Self> {
        let n = check_dims(dims)?;
        Ok(Tensor {
            dims: dims.to_vec(),
            dtype,
            data: vec![0.0; n],
        })
    }

    pub fn full(dims: &[usize], value: f64, dtype: DType) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims, vec![value; n], dtype)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            dtype: DType::F64,
            data: vec![value],
        }
    }

    /// Zero-mean normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        let n = check_dims(dims)?;
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::new(dims, data, DType::F64)
    }

    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        let n = check_dims(dims)?;
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::new(dims, data, DType::F64)
    }

    /// Builds a result tensor for an op, inheriting `dtype` rounding.
    pub(crate) fn from_op(dims: Vec<usize>, data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        let mut t = Tensor { dims, dtype, data };
        t.round_to_dtype();
        t
    }

    fn round_to_dtype(&mut self) {
        if self.dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Applies `f` to every value in place, re-rounding for `F32`.
    pub fn map_inplace(&mut self, mut f: impl FnMut(f64) -> f64) {
        let dtype = self.dtype;
        for v in &mut self.data {
            *v = dtype.round(f(*v));
        }
    }

    pub fn set(&mut self, index: usize, value: f64) {
        self.data[index] = self.dtype.round(value);
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Tensor::from_op(self.dims.clone(), self.data.clone(), dtype)
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor> {
        let n = check_dims(dims)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            dtype: self.dtype,
            data: self.data.clone(),
        })
    }

    /// Row-major element lookup.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.dims, index)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff needs equal dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

pub(crate) fn flat_index(dims: &[usize], index: &[usize]) -> usize {
    assert_eq!(dims.len(), index.len(), "index rank mismatch");
    let mut flat = 0;
    for (d, i) in dims.iter().zip(index) {
        assert!(i < d, "index {index:?} out of bounds for {dims:?}");
        flat = flat * d + i;
    }
    flat
}

/// Row-major strides for `dims`.
pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_dims() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5], DType::F64).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6], DType::F64).is_ok());
    }

    #[test]
    fn rank_is_bounded() {
        assert!(Tensor::zeros(&[1, 1, 1, 1, 1], DType::F64).is_err());
        assert!(Tensor::zeros(&[], DType::F64).is_err());
        assert!(Tensor::zeros(&[2, 0], DType::F64).is_err());
    }

    #[test]
    fn f32_rounds_stored_values() {
        let t = Tensor::new(&[1], vec![0.1], DType::F32).unwrap();
        assert_eq!(t.item(), 0.1f32 as f64);
        assert_ne!(t.item(), 0.1);
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        let t = Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect());
        assert_eq!(t.at(&[1, 2]), 5.0);
    }
}
