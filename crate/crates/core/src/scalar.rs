//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Real scalar usable by the tensor engine: `f32` or `f64`.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = a·b + beta·c` over strided row/column layouts.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n` (row-major, contiguous).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    /// `a · b` into a fresh `m×n` buffer.
    #[allow(clippy::too_many_arguments)]
    fn gemm_new(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize) -> Vec<Self>;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n, "gemm output too small");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c[..m * n].iter_mut().for_each(|x| *x *= beta);
                    return;
                }
                let max_a = (m as isize - 1) * rsa + (k as isize - 1) * csa;
                let max_b = (k as isize - 1) * rsb + (n as isize - 1) * csb;
                assert!(max_a >= 0 && (max_a as usize) < a.len(), "gemm lhs out of range");
                assert!(max_b >= 0 && (max_b as usize) < b.len(), "gemm rhs out of range");
                // SAFETY: the asserts above bound every strided access into `a` and `b`
                // (strides are non-negative by construction at every call site), and `c`
                // holds at least m·n elements in row-major order.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn gemm_new(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
            ) -> Vec<Self> {
                if m == 0 || n == 0 || k == 0 {
                    return vec![0.0; m * n];
                }
                let max_a = (m as isize - 1) * rsa + (k as isize - 1) * csa;
                let max_b = (k as isize - 1) * rsb + (n as isize - 1) * csb;
                assert!(max_a >= 0 && (max_a as usize) < a.len(), "gemm lhs out of range");
                assert!(max_b >= 0 && (max_b as usize) < b.len(), "gemm rhs out of range");
                let mut c = Vec::with_capacity(m * n);
                // SAFETY: operand bounds as in `gemm`; with β = 0 the kernel writes every
                // element of `c` without reading it, so the length can be set afterwards.
                unsafe {
                    $gemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
                    c.set_len(m * n);
                }
                c
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_and_transposed_strides() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        f64::gemm(m, k, n, &a, k as isize, 1, &b, n as isize, 1, 0.0, &mut c);
        let want = naive(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // bᵀ stored as n×k, read back through swapped strides
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![1.0; m * n];
        f64::gemm(m, k, n, &a, k as isize, 1, &bt, 1, k as isize, 1.0, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_new_matches_naive() {
        let (m, k, n) = (7, 3, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.53).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.29).cos()).collect();
        let c = f64::gemm_new(m, k, n, &a, k as isize, 1, &b, n as isize, 1);
        assert_eq!(c.len(), m * n);
        for (x, y) in c.iter().zip(&naive(m, k, n, &a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(f64::gemm_new(2, 0, 3, &[], 0, 1, &[], 3, 1), vec![0.0; 6]);
        let c32 = f32::gemm_new(1, 2, 1, &[1.0, 2.0], 2, 1, &[3.0, 4.0], 1, 1);
        assert_eq!(c32, vec![11.0]);
    }

    #[test]
    fn f32_gemm_runs() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [0.0f32];
        f32::gemm(1, 2, 1, &a, 2, 1, &b, 1, 1, 0.0, &mut c);
        assert_eq!(c[0], 11.0);
    }
}
