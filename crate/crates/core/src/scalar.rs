//! Element-type abstraction for the tensor engine.
//!
//! Every kernel is generic over [`Scalar`] so one implementation serves both
//! `f64` (the default throughout the crate — it gives the numeric headroom the
//! 1e-12 identity checks and 1e-6 gradient checks rely on) and `f32`. The only
//! per-type specialization is the matrix-multiply inner kernel, which the two
//! float impls route to `matrixmultiply`'s SIMD gemm.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, NumCast};

/// Floating-point element type usable by the tensor engine.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Send + Sync + Debug + Display + 'static
{
    /// Cast from any numeric type, panicking only if the value is not
    /// representable (never the case for the small constants used here).
    fn cast<U: NumCast>(x: U) -> Self {
        NumCast::from(x).expect("numeric cast failed")
    }

    /// `out[m×n] = A·B` where A is read with strides `(rsa, csa)` and B with
    /// `(rsb, csb)`; `out` is row-major and fully overwritten. The stride form
    /// lets one kernel serve plain, `Aᵀ·B`, and `A·Bᵀ` products without
    /// materializing transposes.
    ///
    /// The default is a straightforward triple loop; `f32`/`f64` override it
    /// with a SIMD gemm. Callers guarantee the strides address only in-bounds
    /// elements.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        out: &mut [Self],
    ) {
        debug_assert_eq!(out.len(), m * n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = Self::zero();
                for l in 0..k {
                    acc = acc + a[i * rsa + l * csa] * b[l * rsb + j * csb];
                }
                out[i * n + j] = acc;
            }
        }
    }
}

/// Bounds-checks that the strided operand layouts stay inside the slices,
/// so the unsafe SIMD gemm calls below are sound.
fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    rsb: usize,
    csb: usize,
    out: &[T],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert_eq!(out.len(), m * n, "gemm: output length");
    if k == 0 {
        return;
    }
    let a_max = (m - 1) * rsa + (k - 1) * csa;
    let b_max = (k - 1) * rsb + (n - 1) * csb;
    assert!(a_max < a.len(), "gemm: lhs stride out of bounds");
    assert!(b_max < b.len(), "gemm: rhs stride out of bounds");
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        out: &mut [Self],
    ) {
        check_gemm_bounds(m, k, n, a, rsa, csa, b, rsb, csb, out);
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            out.fill(0.0);
            return;
        }
        // SAFETY: strides verified in-bounds above; out is exactly m×n.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        out: &mut [Self],
    ) {
        check_gemm_bounds(m, k, n, a, rsa, csa, b, rsb, csb, out);
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            out.fill(0.0);
            return;
        }
        // SAFETY: strides verified in-bounds above; out is exactly m×n.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
