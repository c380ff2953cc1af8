use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type: `f64` for checks, `f32` for benchmarks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    /// `C ← A·B + beta·C` for strided `[m×k]`, `[k×n]` and row-major
    /// `[m×n]` operands.
    fn gemm(m: usize, k: usize, n: usize, a: StridedRef<'_, Self>, b: StridedRef<'_, Self>, beta: Self, c: &mut [Self]);
}

/// A matrix view given by a slice and its row and column strides.
#[derive(Clone, Copy, Debug)]
pub struct StridedRef<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> StridedRef<'a, T> {
    /// Row-major `[rows × cols]`.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        StridedRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major `[rows × cols]` matrix.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        StridedRef {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }
}

fn check_gemm<T>(m: usize, k: usize, n: usize, a: &StridedRef<'_, T>, b: &StridedRef<'_, T>, c: &[T]) {
    let last = |r: usize, cc: usize, s: &StridedRef<'_, T>| {
        if r == 0 || cc == 0 {
            0
        } else {
            (r - 1) * s.row_stride + (cc - 1) * s.col_stride + 1
        }
    };
    assert!(a.data.len() >= last(m, k, a), "gemm: A view out of bounds");
    assert!(b.data.len() >= last(k, n, b), "gemm: B view out of bounds");
    assert_eq!(c.len(), m * n, "gemm: C has the wrong size");
}

macro_rules! real_gemm {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: StridedRef<'_, Self>,
                b: StridedRef<'_, Self>,
                beta: Self,
                c: &mut [Self],
            ) {
                check_gemm(m, k, n, &a, &b, c);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the bounds of every view were checked above and C
                // does not alias A or B (it is borrowed mutably).
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr(),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr(),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

real_gemm!(f32, matrixmultiply::sgemm);
real_gemm!(f64, matrixmultiply::dgemm);

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}
