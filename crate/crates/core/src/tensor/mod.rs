//! Dense row-major tensors and the numeric primitives everything else is built on.
//!
//! Values are held as `f64` regardless of the logical dtype. A tensor tagged
//! [`DType::F32`] keeps every stored value rounded to single precision, so
//! serialization and cross-implementation comparisons see genuine `f32` data.

mod io;
mod ops;

pub use io::{load_tensor, read_tensor, save_tensor, write_tensor};
pub use ops::*;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::F32 => x as f32 as f64,
            DType::F64 => x,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Result dtype of an op mixing `self` and `other`.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("unknown dtype {other:?}"))),
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds an `f64` tensor. Fails when `shape` does not describe `data.len()` values.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(DType::F64, shape, data)
    }

    pub fn with_dtype(dtype: DType, shape: &[usize], mut data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            ));
        }
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        Ok(Tensor {
            dtype,
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernels that already produced a correctly sized buffer.
    pub(crate) fn from_parts(dtype: DType, shape: Vec<usize>, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        Tensor { dtype, shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            dtype: DType::F64,
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dtype: DType::F64,
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            dtype: DType::F64,
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor {
            dtype: other.dtype,
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Writers are responsible for keeping
    /// `F32` tensors on the single-precision grid (see [`Tensor::conform`]).
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    /// Casts to `dtype`, rounding when narrowing.
    pub fn cast(&self, dtype: DType) -> Tensor {
        Tensor::from_parts(dtype, self.shape.clone(), self.data.clone())
    }

    pub fn into_dtype(self, dtype: DType) -> Tensor {
        Tensor::from_parts(dtype, self.shape, self.data)
    }

    /// Re-applies the dtype rounding after raw writes through [`Tensor::data_mut`].
    pub fn conform(&mut self) {
        if self.dtype == DType::F32 {
            self.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        Ok(Tensor {
            dtype: self.dtype,
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn into_reshaped(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = self.dtype.round(value);
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.dtype,
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor::from_parts(
            self.dtype.promote(other.dtype),
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Surfaces NaN/Inf as an error naming the producing op.
    pub fn ensure_finite(self, op: &str) -> Result<Tensor> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "shape mismatch: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn expect_ndim(&self, ndim: usize, what: &str) -> Result<()> {
        if self.shape.len() != ndim {
            return Err(shape_err!(
                "{what} must be {ndim}-D, got shape {:?}",
                self.shape
            ));
        }
        Ok(())
    }

    /// Bit pattern equality, distinguishing -0.0 from 0.0 and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dtype == other.dtype
            && self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Channel slice `[start, start+len)` of a `C×...` tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (&c, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| shape_err!("narrow_channels on a scalar"))?;
        if start + len > c {
            return Err(shape_err!(
                "channel range {start}..{} out of {c}",
                start + len
            ));
        }
        let plane: usize = rest.iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Tensor {
            dtype: self.dtype,
            shape,
            data: self.data[start * plane..(start + len) * plane].to_vec(),
        })
    }

    /// Concatenates `C_k×rest` tensors along the leading axis.
    pub fn cat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("cat_channels of nothing"))?;
        let rest = &first.shape[1..];
        let mut channels = 0;
        let mut dtype = first.dtype;
        for p in parts {
            if p.ndim() == 0 || &p.shape[1..] != rest {
                return Err(shape_err!(
                    "cat_channels: {:?} incompatible with {:?}",
                    p.shape,
                    first.shape
                ));
            }
            channels += p.shape[0];
            dtype = dtype.promote(p.dtype);
        }
        let mut data = Vec::with_capacity(channels * rest.iter().product::<usize>());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(rest);
        Ok(Tensor::from_parts(dtype, shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(Tensor::scalar(3.0).shape(), &[] as &[usize]);
    }

    #[test]
    fn f32_tensors_stay_on_the_single_precision_grid() {
        let t = Tensor::with_dtype(DType::F32, &[1], vec![0.1]).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        assert_ne!(t.data()[0], 0.1);
    }

    #[test]
    fn narrow_and_cat_are_inverse() {
        let t = Tensor::from_fn(&[5, 2, 3], |i| i as f64);
        let a = t.narrow_channels(0, 2).unwrap();
        let b = t.narrow_channels(2, 3).unwrap();
        assert!(Tensor::cat_channels(&[&a, &b]).unwrap().bit_eq(&t));
        assert!(t.narrow_channels(4, 2).is_err());
    }

    #[test]
    fn ensure_finite_rejects_nan() {
        let t = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(t.ensure_finite("test"), Err(Error::NonFinite(_))));
    }
}
