//! Scalar abstraction shared by every numeric routine in the crate.

use nalgebra::RealField;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};
use rustfft::FftNum;

/// Real floating-point scalar (`f32` or `f64`).
///
/// Everything in the crate is generic over this trait. Complex samples are
/// `num_complex::Complex<T>`, which nalgebra treats as a `ComplexField`, so
/// the same bound covers dense complex linear algebra and FFTs.
pub trait Real:
    RealField + Copy + Default + FromPrimitive + ToPrimitive + FloatConst + FftNum
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// Converts a count.
    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Element type of a [`ChannelGrid`](crate::grid::ChannelGrid): either a real
/// scalar or a complex sample over it.
pub trait Sample<T: Real>: nalgebra::ComplexField<RealField = T> + Copy + Default {}

impl<T: Real> Sample<T> for T {}
impl<T: Real> Sample<T> for num_complex::Complex<T> {}
