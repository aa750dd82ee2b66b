use std::ops::{Add, Mul, Neg, Sub};

use super::scalar::Scalar;

/// First-order forward-mode number over any [`Scalar`].
///
/// `Dual<f64>` is the plain directional-derivative scalar. `Dual<Var>` puts
/// the tangent computation onto a tape, so the directional derivative can
/// itself be differentiated in reverse mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<S> {
    pub primal: S,
    pub tangent: S,
}

pub type DualScalar = Dual<f64>;

impl<S: Scalar> Dual<S> {
    pub fn new(primal: S, tangent: S) -> Self {
        Self { primal, tangent }
    }

    /// A value with zero tangent.
    pub fn constant(primal: S) -> Self {
        Self {
            tangent: primal.zero_like(),
            primal,
        }
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual::new(self.primal + o.primal, self.tangent + o.tangent)
    }
}

impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual::new(self.primal - o.primal, self.tangent - o.tangent)
    }
}

impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual::new(
            self.primal * o.primal,
            self.primal * o.tangent + o.primal * self.tangent,
        )
    }
}

impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.primal, -self.tangent)
    }
}

impl<S: Scalar> Add<f64> for Dual<S> {
    type Output = Self;
    #[inline]
    fn add(self, c: f64) -> Self {
        Dual::new(self.primal + c, self.tangent)
    }
}

impl<S: Scalar> Mul<f64> for Dual<S> {
    type Output = Self;
    #[inline]
    fn mul(self, c: f64) -> Self {
        Dual::new(self.primal * c, self.tangent * c)
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    fn lift(&self, c: f64) -> Self {
        Dual::new(self.primal.lift(c), self.primal.lift(0.0))
    }
    fn value(&self) -> f64 {
        self.primal.value()
    }
    fn tanh(self) -> Self {
        let t = self.primal.tanh();
        Dual::new(t, self.tangent * (-(t * t) + 1.0))
    }
    fn sigmoid(self) -> Self {
        let s = self.primal.sigmoid();
        Dual::new(s, self.tangent * (s * (-s + 1.0)))
    }
    fn relu(self) -> Self {
        Dual::new(self.primal.relu(), self.tangent * self.primal.step())
    }
    fn step(self) -> Self {
        Dual::new(self.primal.step(), self.primal.zero_like())
    }
    fn sin(self) -> Self {
        Dual::new(self.primal.sin(), self.tangent * self.primal.cos())
    }
    fn cos(self) -> Self {
        Dual::new(self.primal.cos(), -(self.tangent * self.primal.sin()))
    }
    fn exp(self) -> Self {
        let e = self.primal.exp();
        Dual::new(e, self.tangent * e)
    }
    fn recip(self) -> Self {
        let r = self.primal.recip();
        Dual::new(r, -(self.tangent * r * r))
    }
}

/// Value and directional derivative of `f` at `primal` along `tangent`.
pub fn jvp<F>(f: F, primal: &[f64], tangent: &[f64]) -> (f64, f64)
where
    F: FnOnce(&[DualScalar]) -> DualScalar,
{
    assert_eq!(primal.len(), tangent.len(), "jvp: primal/tangent length mismatch");
    let args: Vec<DualScalar> = primal
        .iter()
        .zip(tangent)
        .map(|(&p, &t)| Dual::new(p, t))
        .collect();
    let out = f(&args);
    (out.primal, out.tangent)
}
