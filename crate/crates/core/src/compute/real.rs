use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Element type tag carried by every tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

/// Floating-point element usable by the compute layer.
///
/// `f32` is the training type; `f64` exists so finite-difference checks are
/// meaningful.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn erf(self) -> Self;

    /// Branch-free exponential used by the elementwise and scan kernels.
    /// Matches `exp` to a few ulp; `f64` uses the libm routine directly.
    fn fast_exp(self) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
    }

    /// `c = alpha * op(a) * op(b) + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Strides must describe in-bounds views of the slices for the given
    /// extents.
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
    const DTYPE: DType = DType::F32;

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }

    #[inline(always)]
    fn fast_exp(self) -> Self {
        expf_poly(self)
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }

    #[inline(always)]
    fn fast_exp(self) -> Self {
        self.exp()
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Range reduction to `2^n * exp(r)`, `|r| <= ln2 / 2`, with a degree-6
/// polynomial for `exp(r)`. Written without branches so loops over it
/// vectorize.
#[inline(always)]
fn expf_poly(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0;
    let xc = x.clamp(-87.3, 88.722_83);
    let n = (xc * LOG2E + ROUND) - ROUND;
    let r = xc - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 0.5;
    let er = p * r * r + r + 1.0;
    let ni = n as i32;
    let half = ni >> 1;
    let s1 = f32::from_bits(((half + 127) as u32) << 23);
    let s2 = f32::from_bits(((ni - half + 127) as u32) << 23);
    let v = er * s1 * s2;
    let v = if x < -87.3 { 0.0 } else { v };
    if x > 88.722_83 { f32::INFINITY } else { v }
}

/// Row-major matrix product helpers over flat slices.
///
/// Each computes `c (+)= op(a) * op(b)`; `accumulate` selects `beta = 1`.
pub mod gemm {
    use super::Real;

    /// `c[m,n] (+)= a[m,k] * b[k,n]`
    pub fn nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        let beta = if accumulate { T::one() } else { T::zero() };
        unsafe {
            T::gemm_raw(
                m, k, n, T::one(),
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                beta, c.as_mut_ptr(), n as isize, 1,
            )
        }
    }

    /// `c[m,n] (+)= a[k,m]^T * b[k,n]`
    pub fn tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        let beta = if accumulate { T::one() } else { T::zero() };
        unsafe {
            T::gemm_raw(
                m, k, n, T::one(),
                a.as_ptr(), 1, m as isize,
                b.as_ptr(), n as isize, 1,
                beta, c.as_mut_ptr(), n as isize, 1,
            )
        }
    }

    /// `c[m,n] (+)= a[m,k] * b[n,k]^T`
    pub fn nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        let beta = if accumulate { T::one() } else { T::zero() };
        unsafe {
            T::gemm_raw(
                m, k, n, T::one(),
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), 1, k as isize,
                beta, c.as_mut_ptr(), n as isize, 1,
            )
        }
    }
}
