use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Floating point element type of the engine. `f64` is the reference
/// precision used by the gradient checks; `f32` is used for training and
/// inference speed paths.
pub trait Scalar: Float + Sum + Default + Debug + Send + Sync + 'static {
    const NAME: &'static str;

    fn from_real(v: f64) -> Self;
    fn to_real(self) -> f64;

    /// Raw strided GEMM: `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// The pointers and strides must describe valid matrices of the given
    /// dimensions, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_real(v: f64) -> Self {
        v as f32
    }

    fn to_real(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_real(v: f64) -> Self {
        v
    }

    fn to_real(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Storage order of a GEMM operand held in a row-major buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    /// The buffer holds the `rows x cols` operand row-major.
    Normal,
    /// The buffer holds the transpose (`cols x rows`, row-major).
    Transposed,
}

/// `c[m,n] = alpha * op(a)[m,k] * op(b)[k,n] + beta * c`, with `c` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too short");
    assert!(b.len() >= k * n, "gemm: rhs buffer too short");
    assert!(c.len() >= m * n, "gemm: output buffer too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the asserts above bound every index the strides can reach, and
    // `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
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

/// Sum of `count` equally sized rows of `rows` into `out`, combining rows in a
/// fixed pairwise tree so the result does not depend on how the rows were
/// produced.
pub(crate) fn pairwise_row_sum<T: Scalar>(rows: &[T], count: usize, out: &mut [T]) {
    let len = out.len();
    debug_assert_eq!(rows.len(), count * len);
    fn rec<T: Scalar>(rows: &[T], lo: usize, hi: usize, len: usize, out: &mut [T]) {
        if hi - lo == 1 {
            out.copy_from_slice(&rows[lo * len..(lo + 1) * len]);
            return;
        }
        let mid = lo + (hi - lo) / 2;
        rec(rows, lo, mid, len, out);
        let mut right = vec![T::zero(); len];
        rec(rows, mid, hi, len, &mut right);
        for (o, r) in out.iter_mut().zip(&right) {
            *o = *o + *r;
        }
    }
    if count == 0 {
        out.iter_mut().for_each(|v| *v = T::zero());
    } else {
        rec(rows, 0, count, len, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_layouts_agree_with_loops() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expect[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, Layout::Normal, &b, Layout::Normal, 0.0, &mut c);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![1.0; m * n];
        gemm(m, k, n, 1.0, &at, Layout::Transposed, &bt, Layout::Transposed, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_sum_matches_plain_sum() {
        let rows: Vec<f64> = (0..7 * 3).map(|i| i as f64).collect();
        let mut out = vec![0.0; 3];
        pairwise_row_sum(&rows, 7, &mut out);
        for j in 0..3 {
            let s: f64 = (0..7).map(|r| rows[r * 3 + j]).sum();
            assert_eq!(out[j], s);
        }
    }
}
