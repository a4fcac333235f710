//! Rank-4 tensors and tape-based reverse-mode autodiff.
//!
//! Every tensor carries a `[N, C, H, W]` shape. Ops are recorded on a
//! [`Graph`] tape during the forward pass; [`Graph::backward`] replays the
//! tape in reverse and accumulates gradients additively, so a value used by
//! several consumers receives the sum of their contributions.
//!
//! The element type is generic over [`Scalar`]: training runs in `f32`,
//! while gradient verification instantiates the same code in `f64`.

mod graph;
mod optim;
mod params;

pub use graph::{Graph, Mode, Var, BCE_CLAMP, DICE_SMOOTH};
pub use optim::{lr_at_epoch, Adam, LrSchedule};
pub use params::{he_uniform, he_uniform_bound, Lease, Param, ParamId, Params};

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating-point element type for tensors and parameters.
///
/// Implemented for `f32` and `f64`. Conversions go through `f64` so that a
/// model built from one seed has the same underlying random draws in either
/// precision.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                self.powi(n)
            }
            #[inline]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                if other > self {
                    other
                } else {
                    self
                }
            }
            #[inline]
            fn minimum(self, other: Self) -> Self {
                if other < self {
                    other
                } else {
                    self
                }
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Shape of a rank-4 tensor, `[N, C, H, W]`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat offset of element `(n, c, h, w)` in row-major order.
    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Flat offset of the start of row `h` in image `(n, c)`.
    #[inline]
    pub fn row(&self, n: usize, c: usize, h: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w
    }
}

impl Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

/// A dense rank-4 tensor. Plain data, no tape attached; see [`Graph`] for
/// recorded operations.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar> {
    pub dims: Dims,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: Dims) -> Self {
        Tensor { dims, data: vec![T::ZERO; dims.numel()] }
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Tensor { dims, data: vec![value; dims.numel()] }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> crate::Result<Self> {
        if data.len() != dims.numel() {
            return Err(crate::Error::dim(format!(
                "tensor data length {} does not match dims {} ({} elements)",
                data.len(),
                dims,
                dims.numel()
            )));
        }
        Ok(Tensor { dims, data })
    }

    /// A `[1, 1, 1, 1]` tensor holding one value.
    pub fn scalar(value: T) -> Self {
        Tensor { dims: Dims::new(1, 1, 1, 1), data: vec![value] }
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.dims.at(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        &mut self.data[self.dims.at(n, c, h, w)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast elementwise through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_row_major_layout() {
        let d = Dims::new(2, 3, 4, 5);
        assert_eq!(d.numel(), 120);
        assert_eq!(d.at(0, 0, 0, 0), 0);
        assert_eq!(d.at(0, 0, 0, 1), 1);
        assert_eq!(d.at(0, 0, 1, 0), 5);
        assert_eq!(d.at(0, 1, 0, 0), 20);
        assert_eq!(d.at(1, 0, 0, 0), 60);
        assert_eq!(d.at(1, 2, 3, 4), 119);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let r = Tensor::<f32>::from_vec(Dims::new(1, 1, 2, 2), vec![0.0; 3]);
        assert!(r.is_err());
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let t = Tensor::<f32>::from_vec(
            Dims::new(1, 1, 1, 3),
            vec![0.5, -1.25, 3.0],
        )
        .unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t, back);
    }
}
