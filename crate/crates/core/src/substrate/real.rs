use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type the tensor engine computes in. Implemented for `f32`
/// (training) and `f64` (gradient checks).
pub trait Real:
    Float + Default + Debug + PartialOrd + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// regions of the given extents.
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

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `c (+)= op(a) * op(b)`.
///
/// `a` is `m×k` (stored `k×m` when `trans_a`), `b` is `k×n` (stored `n×k`
/// when `trans_b`), `c` is `m×n`. With `accumulate` the product is added to
/// the existing contents of `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs extent");
    assert_eq!(b.len(), k * n, "gemm: rhs extent");
    assert_eq!(c.len(), m * n, "gemm: out extent");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::ONE } else { F::ZERO };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = F::ZERO);
        }
        return;
    }
    // SAFETY: extents were asserted above; `c` is a unique borrow.
    unsafe {
        F::gemm_raw(m, k, n, F::ONE, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0f64, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [0.0f64; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, false);
        assert_eq!(c, c2);

        gemm(2, 3, 2, &a, false, &b, false, &mut c2, true);
        assert_eq!(c2, [8.0, 10.0, 20.0, 22.0]);
    }
}
