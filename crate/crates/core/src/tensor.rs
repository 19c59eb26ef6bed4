//! Dense row-major tensors and the handful of kernels the model needs.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};
use serde::{Deserialize, Serialize};

/// Floating-point element type. Training runs at `f32`, gradient checks at `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c[m,n] = beta * c + a[m,k] · b[k,n]` with explicit (row, column)
    /// strides for `a` and `b`; `c` is dense row-major.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_strides: (isize, isize), b: &[Self], b_strides: (isize, isize), beta: Self, c: &mut [Self]);
}

fn check_gemm<S>(m: usize, k: usize, n: usize, a: &[S], (ra, ca): (isize, isize), b: &[S], (rb, cb): (isize, isize), c: &[S]) {
    let span = |rows: usize, cols: usize, r: isize, cl: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * r as usize + (cols - 1) * cl as usize + 1
        }
    };
    assert!(ra >= 0 && ca >= 0 && rb >= 0 && cb >= 0);
    assert!(a.len() >= span(m, k, ra, ca), "gemm: lhs too short");
    assert!(b.len() >= span(k, n, rb, cb), "gemm: rhs too short");
    assert_eq!(c.len(), m * n, "gemm: output size");
}

impl Scalar for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], sa: (isize, isize), b: &[f32], sb: (isize, isize), beta: f32, c: &mut [f32]) {
        check_gemm(m, k, n, a, sa, b, sb, c);
        // SAFETY: check_gemm verified that every strided access stays in bounds.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta, c.as_mut_ptr(), n as isize, 1);
        }
    }
}

impl Scalar for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), beta: f64, c: &mut [f64]) {
        check_gemm(m, k, n, a, sa, b, sb, c);
        // SAFETY: check_gemm verified that every strided access stays in bounds.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta, c.as_mut_ptr(), n as isize, 1);
        }
    }
}

/// A named-shape tensor with row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: S) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` when the tensor is viewed as a matrix; vectors are one row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [.., last] => (self.numel() / last.max(&1), *last),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::of(v.f64())).collect(),
        }
    }
}

/// `out[n,m] = x[n,k] · w[k,m]`
pub fn matmul<S: Scalar>(x: &[S], w: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    assert_eq!(x.len(), n * k);
    assert_eq!(w.len(), k * m);
    let mut out = vec![S::zero(); n * m];
    S::gemm(n, k, m, x, (k as isize, 1), w, (m as isize, 1), S::zero(), &mut out);
    out
}

/// `out[n,m] = x[n,k] · w[m,k]ᵀ`
pub fn matmul_t<S: Scalar>(x: &[S], w: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    assert_eq!(x.len(), n * k);
    assert_eq!(w.len(), m * k);
    let mut out = vec![S::zero(); n * m];
    S::gemm(n, k, m, x, (k as isize, 1), w, (1, k as isize), S::zero(), &mut out);
    out
}

/// `acc[k,m] += x[n,k]ᵀ · g[n,m]`
pub fn matmul_tn_acc<S: Scalar>(acc: &mut [S], x: &[S], g: &[S], n: usize, k: usize, m: usize) {
    assert_eq!(acc.len(), k * m);
    assert_eq!(x.len(), n * k);
    assert_eq!(g.len(), n * m);
    S::gemm(k, n, m, x, (1, k as isize), g, (m as isize, 1), S::one(), acc);
}

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut s = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Numerically stable in-place softmax over one row.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `ln Σ exp(row)` computed with max subtraction.
pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
