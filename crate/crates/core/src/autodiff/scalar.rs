use std::ops::{Add, Mul, Neg, Sub};

/// Arithmetic shared by plain floats, dual numbers and recorded tape
/// variables. Model and operator code is written once against this trait and
/// instantiated for each differentiation mode.
///
/// Constants are produced with [`Scalar::lift`], which places the constant in
/// the same context (tape, dual level) as `self`.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    fn lift(&self, c: f64) -> Self;
    /// Primal value as a plain float.
    fn value(&self) -> f64;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    /// `max(x, 0)`; the derivative at zero is taken to be zero.
    fn relu(self) -> Self;
    /// Heaviside step `1[x > 0]`, treated as piecewise constant.
    fn step(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn recip(self) -> Self;

    fn square(self) -> Self {
        self * self
    }

    fn zero_like(&self) -> Self {
        self.lift(0.0)
    }

    /// Inner product of two equally long slices.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = a[0] * b[0];
        for (x, y) in a.iter().zip(b).skip(1) {
            acc = acc + *x * *y;
        }
        acc
    }
}

pub(crate) fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Scalar for f64 {
    #[inline]
    fn lift(&self, c: f64) -> Self {
        c
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    #[inline]
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    #[inline]
    fn step(self) -> Self {
        if self > 0.0 {
            1.0
        } else {
            0.0
        }
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn recip(self) -> Self {
        1.0 / self
    }
    fn dot(a: &[Self], b: &[Self]) -> Self {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
}
