//! Dense row-major tensors and the handful of linear-algebra primitives the
//! optimizers and diagnostics are built on.

mod contract;
pub mod io;

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use contract::{contract, ContractionPlan, Label};

/// Ordered list of positive extents. Rank 0 is a scalar.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "extent {pos} of {dims:?} is zero; all extents must be >= 1"
            )));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ShapeMismatch(format!("element count of {dims:?} overflows")))?;
        Ok(Shape { dims })
    }

    pub fn scalar() -> Self {
        Shape { dims: Vec::new() }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.dims[i + 1];
        }
        strides
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, ")")
    }
}

impl TryFrom<&[usize]> for Shape {
    type Error = Error;

    fn try_from(dims: &[usize]) -> Result<Self> {
        Shape::new(dims.to_vec())
    }
}

/// A real tensor stored row-major in 64-bit floats.
///
/// Every constructor rejects non-finite entries, so a `DenseTensor` obtained
/// from this crate never holds NaN or infinity.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape} holds {} elements but {} values were given",
                shape.numel(),
                data.len()
            )));
        }
        ensure_finite(&data, "tensor construction")?;
        Ok(DenseTensor { shape, data })
    }

    /// Shorthand for `from_vec(Shape::new(dims)?, data)`.
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        DenseTensor::from_vec(Shape::new(dims.to_vec())?, data)
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        DenseTensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        let n = shape.numel();
        DenseTensor::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        DenseTensor::from_vec(Shape::scalar(), vec![value])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let shape = Shape::new(vec![n, n])?;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Ok(DenseTensor { shape, data })
    }

    /// Entries drawn i.i.d. from N(0, scale²).
    pub fn random_normal<R: Rng + ?Sized>(shape: Shape, scale: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        DenseTensor { shape, data }
    }

    pub(crate) fn from_parts_unchecked(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        DenseTensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        if index.len() != self.rank() {
            return Err(Error::ShapeMismatch(format!(
                "index of length {} into tensor of rank {}",
                index.len(),
                self.rank()
            )));
        }
        let mut offset = 0;
        for (axis, (&i, &d)) in index.iter().zip(self.dims()).enumerate() {
            if i >= d {
                return Err(Error::ShapeMismatch(format!(
                    "index {i} out of bounds for axis {axis} with extent {d}"
                )));
            }
            offset = offset * d + i;
        }
        Ok(self.data[offset])
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(DenseTensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Reorders axes: axis `i` of the result is axis `axes[i]` of `self`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::ShapeMismatch(format!(
                "{axes:?} is not a permutation of the {rank} axes"
            )));
        }
        let dims: Vec<usize> = axes.iter().map(|&a| self.dims()[a]).collect();
        let data = permute_data(&self.data, self.dims(), axes);
        Ok(DenseTensor::from_parts_unchecked(Shape { dims }, data))
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|x| c * x).collect();
        ensure_finite(&data, "scale")?;
        Ok(DenseTensor::from_parts_unchecked(self.shape.clone(), data))
    }

    pub fn hadamard(&self, other: &DenseTensor) -> Result<Self> {
        same_shape(self, other, "hadamard")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(DenseTensor::from_parts_unchecked(self.shape.clone(), data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

pub(crate) fn ensure_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(what.to_string()))
    }
}

fn same_shape(a: &DenseTensor, b: &DenseTensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {} vs {}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub(crate) fn permute_data(data: &[f64], dims: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = dims.len();
    if axes.iter().enumerate().all(|(i, &a)| i == a) {
        return data.to_vec();
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * dims[i + 1];
    }
    let out_dims: Vec<usize> = axes.iter().map(|&a| dims[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();

    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    let inner_extent = out_dims[rank - 1];
    let inner_stride = strides[rank - 1];
    loop {
        let mut o = offset;
        for _ in 0..inner_extent {
            out.push(data[o]);
            o += inner_stride;
        }
        // advance the odometer over all but the innermost axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            counter[axis] += 1;
            offset += strides[axis];
            if counter[axis] < out_dims[axis] {
                break;
            }
            offset -= strides[axis] * out_dims[axis];
            counter[axis] = 0;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum of entrywise products.
pub fn frobenius_inner(a: &DenseTensor, b: &DenseTensor) -> Result<f64> {
    same_shape(a, b, "frobenius_inner")?;
    Ok(dot(&a.data, &b.data))
}

/// Sum of squares of all entries; identical to `frobenius_inner(a, a)`.
pub fn frobenius_norm_sq(a: &DenseTensor) -> f64 {
    dot(&a.data, &a.data)
}

/// `alpha * a + beta * b`, entrywise.
pub fn axpy_scale(a: &DenseTensor, alpha: f64, b: &DenseTensor, beta: f64) -> Result<DenseTensor> {
    same_shape(a, b, "axpy_scale")?;
    let data: Vec<f64> = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| alpha * x + beta * y)
        .collect();
    ensure_finite(&data, "axpy_scale")?;
    Ok(DenseTensor::from_parts_unchecked(a.shape.clone(), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> DenseTensor {
        DenseTensor::new(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn shape_rejects_zero_extent_and_overflow() {
        assert!(Shape::new(vec![2, 0]).is_err());
        assert!(Shape::new(vec![usize::MAX, 2]).is_err());
        assert_eq!(Shape::scalar().numel(), 1);
        assert_eq!(Shape::new(vec![2, 3, 4]).unwrap().strides(), vec![12, 4, 1]);
    }

    #[test]
    fn construction_rejects_bad_length_and_nan() {
        assert!(matches!(
            DenseTensor::new(&[2, 2], vec![1.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            DenseTensor::new(&[1], vec![f64::NAN]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn inner_products() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(frobenius_inner(&a, &a).unwrap(), 30.0);
        let z = DenseTensor::zeros(a.shape().clone());
        assert_eq!(frobenius_inner(&a, &z).unwrap(), 0.0);
        assert_eq!(frobenius_norm_sq(&t(&[1, 2], &[3.0, 4.0])), 25.0);
        assert_eq!(frobenius_norm_sq(&DenseTensor::zeros(Shape::new(vec![2, 3]).unwrap())), 0.0);
        assert!(frobenius_inner(&a, &t(&[4], &[1.0; 4])).is_err());
    }

    #[test]
    fn norm_is_homogeneous_of_degree_two() {
        let a = t(&[3], &[1.0, -2.0, 0.5]);
        let c = 3.0;
        let scaled = a.scale(c).unwrap();
        assert!((frobenius_norm_sq(&scaled) - c * c * frobenius_norm_sq(&a)).abs() < 1e-12);
    }

    #[test]
    fn axpy_cases() {
        let a = t(&[1, 1], &[1.0]);
        let b = t(&[1, 1], &[3.0]);
        assert_eq!(axpy_scale(&a, 1.0, &b, 0.0).unwrap(), a);
        assert_eq!(axpy_scale(&a, 0.0, &b, 1.0).unwrap(), b);
        assert_eq!(axpy_scale(&a, 2.0, &b, -1.0).unwrap().data(), &[-1.0]);
        assert!(matches!(
            axpy_scale(&a, f64::MAX, &b, f64::MAX),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let a = DenseTensor::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.dims(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(p.get(&[k, i, j]).unwrap(), a.get(&[i, j, k]).unwrap());
                }
            }
        }
        assert!(a.permute(&[0, 0, 1]).is_err());
    }
}
