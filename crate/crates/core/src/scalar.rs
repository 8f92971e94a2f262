//! Floating point abstraction shared by every numeric routine in the workspace.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the solvers and networks are generic over: `f32` or `f64`.
///
/// Besides the arithmetic bounds, each implementation routes dense
/// matrix products to the matching `matrixmultiply` kernel.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Short type name, recorded in checkpoints and reports.
    const NAME: &'static str;

    /// `C <- alpha * A * B + beta * C` over strided row/column layouts.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices, and `c` must not alias `a` or `b`.
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

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
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

    #[inline]
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

/// Logistic function `1 / (1 + e^-x)`, evaluated without overflow.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of `sigmoid(logit)` against `label`.
#[inline]
pub fn bce_with_logit<T: Scalar>(logit: T, label: T) -> T {
    softplus(logit) - label * logit
}

/// Lower clamp applied to sigmoid outputs before they become curvature
/// weights: `1e-12`, or machine epsilon where `1 - 1e-12` would round to one.
#[inline]
pub fn sigmoid_clamp<T: Scalar>() -> T {
    T::lit(1e-12).max(T::epsilon())
}

/// Sigmoid clamped to `[c, 1 - c]` with `c = sigmoid_clamp()`.
#[inline]
pub fn clamped_sigmoid<T: Scalar>(x: T) -> T {
    let c = sigmoid_clamp::<T>();
    sigmoid(x).max(c).min(T::one() - c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn clamped_sigmoid_stays_inside_open_interval() {
        for x in [-1e4, -50.0, 0.0, 50.0, 1e4] {
            let s32 = clamped_sigmoid(x as f32);
            let s64 = clamped_sigmoid(x);
            assert!(s32 > 0.0 && s32 < 1.0);
            assert!(s64 > 0.0 && s64 < 1.0);
        }
    }

    #[test]
    fn bce_matches_naive_formula() {
        for &(z, y) in &[(0.3f64, 1.0), (-2.0, 0.0), (4.0, 0.0), (-0.7, 1.0)] {
            let p = 1.0 / (1.0 + (-z).exp());
            let naive = -y * p.ln() - (1.0 - y) * (1.0 - p).ln();
            assert!((bce_with_logit(z, y) - naive).abs() < 1e-12);
        }
    }
}
