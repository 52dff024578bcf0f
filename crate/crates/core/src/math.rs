//! Scalar plumbing: the float trait the network is generic over, dense
//! matrix products, and degree-based trigonometry.

use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type used by tensors and layers.
///
/// Training runs in `f32`; gradient checks run the same code in `f64`.
pub trait Real:
    Float
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
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a * b + beta * c` for row-major `a: m×k`, `b: k×n`, `c: m×n`,
    /// with `a` and/or `b` optionally read transposed.
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]);
}

macro_rules! impl_real {
    ($t:ty, $gemm:ident) => {
        impl Real for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the strides above address exactly the m×k, k×n and m×n
                // row-major blocks whose sizes were checked against the slices.
                unsafe {
                    matrixmultiply::$gemm(
                        m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, sgemm);
impl_real!(f64, dgemm);

/// Mathematical modulo into `[0, period)`.
///
/// `rem_euclid` can round tiny negative inputs up to exactly `period`; those
/// are folded back to zero so the half-open range always holds.
#[inline]
pub fn wrap(x: f64, period: f64) -> f64 {
    let m = num_traits::Euclid::rem_euclid(&x, &period);
    if m >= period {
        0.0
    } else {
        m
    }
}

/// Normalizes an angle in degrees into `[0, 360)`.
#[inline]
pub fn wrap_deg(deg: f64) -> f64 {
    wrap(deg, 360.0)
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
pub fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let a = wrap_deg(deg);
    if a == 0.0 {
        (0.0, 1.0)
    } else if a == 90.0 {
        (1.0, 0.0)
    } else if a == 180.0 {
        (0.0, -1.0)
    } else if a == 270.0 {
        (-1.0, 0.0)
    } else {
        let r = a.to_radians();
        (libm::sin(r), libm::cos(r))
    }
}

/// Angle in degrees `[0, 360)` of the vector `(x, y)`.
pub fn atan2_deg(y: f64, x: f64) -> f64 {
    wrap_deg(libm::atan2(y, x).to_degrees())
}

pub(crate) fn mean(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64
}

/// Population variance.
pub(crate) fn variance(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|&v| (v as f64 - m) * (v as f64 - m)).sum::<f64>() / values.len() as f64
}
