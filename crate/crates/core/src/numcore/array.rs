//! Dense row-major float arrays, the carrier type for every latent,
//! parameter and gradient in this crate.

use crate::error::{CoreError, Result};
use std::fmt;

/// Scalar types the numeric core runs on. Production code uses `f32`;
/// finite-difference oracles instantiate the same code at `f64`.
pub trait Element:
    num_traits::Float + num_traits::FromPrimitive + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Dense matrix multiply `c = a * b` with `a: [m,k]`, `b: [k,n]`,
    /// `c: [m,n]`, all row-major.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    /// `c[m,n] = a[m,k] * b^T` where `b` is stored row-major as `[n,k]`.
    fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    /// `c[k,n] = a^T * b` where `a` is stored row-major as `[m,k]`, `b` as `[m,n]`.
    fn gemm_tn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }
}

macro_rules! impl_element {
    ($ty:ty, $gemm:path) => {
        impl Element for $ty {
            fn gemm(m: usize, k: usize, n: usize, a: &[$ty], b: &[$ty], c: &mut [$ty]) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                unsafe {
                    $gemm(
                        m, k, n, 1.0,
                        a.as_ptr(), k as isize, 1,
                        b.as_ptr(), n as isize, 1,
                        0.0,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_nt(m: usize, k: usize, n: usize, a: &[$ty], b: &[$ty], c: &mut [$ty]) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), n * k);
                debug_assert_eq!(c.len(), m * n);
                unsafe {
                    $gemm(
                        m, k, n, 1.0,
                        a.as_ptr(), k as isize, 1,
                        // b viewed through swapped strides acts as its transpose
                        b.as_ptr(), 1, k as isize,
                        0.0,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }

            fn gemm_tn(m: usize, k: usize, n: usize, a: &[$ty], b: &[$ty], c: &mut [$ty]) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), m * n);
                debug_assert_eq!(c.len(), k * n);
                unsafe {
                    $gemm(
                        k, m, n, 1.0,
                        a.as_ptr(), 1, k as isize,
                        b.as_ptr(), n as isize, 1,
                        0.0,
                        c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

/// Contiguous row-major float tensor.
///
/// Invariant: `shape.iter().product() == data.len()`. Operations that can
/// produce NaN/Inf surface an error instead of propagating them.
#[derive(Clone, PartialEq)]
pub struct DenseArray<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> DenseArray<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CoreError::shape(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, expected, data.len()),
            ));
        }
        Ok(DenseArray {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Build from a generator called once per element in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut() -> T) -> Self {
        let len = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            data: (0..len).map(|_| f()).collect(),
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(CoreError::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(DenseArray {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combine; shapes must already agree.
    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(CoreError::shape(
                "zip_with",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(DenseArray {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Squared L2 norm of the whole array, accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    /// Rows of the leading axis as slices; `[b, ...]` yields `b` slices.
    pub fn lead_chunks(&self) -> impl Iterator<Item = &[T]> {
        let row = if self.shape.is_empty() {
            self.data.len().max(1)
        } else {
            self.shape[1..].iter().product::<usize>()
        };
        self.data.chunks(row.max(1))
    }

    pub fn cast<U: Element>(&self) -> DenseArray<U> {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl<T: Element> fmt::Debug for DenseArray<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DenseArray{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = DenseArray::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, CoreError::ShapeMismatch { .. }));
    }

    #[test]
    fn shape_product_matches_len() {
        let a = DenseArray::<f32>::zeros(&[4, 3, 2]);
        assert_eq!(a.len(), 24);
        assert_eq!(a.shape(), &[4, 3, 2]);
    }

    #[test]
    fn gemm_matches_naive_product() {
        // 2x3 times 3x4 against a hand-expanded triple loop.
        let a = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b: Vec<f32> = (0..12).map(|i| (i as f32) * 0.5 - 2.0).collect();
        let mut c = vec![0.0f32; 8];
        f32::gemm(2, 3, 4, &a, &b, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 0.0f64;
                for k in 0..3 {
                    s += (a[i * 3 + k] as f64) * (b[k * 4 + j] as f64);
                }
                assert!((c[i * 4 + j] as f64 - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn finite_detection() {
        let mut a = DenseArray::<f32>::zeros(&[3]);
        assert!(a.all_finite());
        a.data_mut()[1] = f32::NAN;
        assert!(!a.all_finite());
    }
}
