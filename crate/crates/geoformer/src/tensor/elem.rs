//! Scalar element types for tensors: f64 (verification default) and f32
//! (selectable for training).

use std::fmt::{Debug, Display};

pub trait Elem:
    num_traits::Float + Debug + Display + Send + Sync + Default + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Gauss error function; kept exact so GELU stays twice differentiable.
    fn erf(self) -> Self;
}

impl Elem for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

impl Elem for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}
