//! Right-hand sides `F[u]` of evolution equations `∂ₜu = F[u]`, evaluated
//! pointwise from a model's closed-form derivatives.

use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::rom::{Jet, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    /// `F[u] = Δu`.
    Heat,
    /// `F[u] = speed · ∇·(tanh u, …, tanh u) = speed · (1 − tanh²u) Σⱼ ∂ⱼu`.
    TanhFlux { speed: f64 },
    /// Viscous Hamilton-Jacobi-Bellman equation posed backward from a terminal
    /// cost. Time is reversed (`τ = T − t`) so the equation is an initial
    /// value problem: `∂_τ u = εΔu − ½|∇u|²`.
    Hjb { epsilon: f64 },
}

impl std::str::FromStr for OperatorSpec {
    type Err = Error;

    /// Parses `heat`, `tanh_flux` (speed 2) or `hjb` (ε = 0.2).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat" => Ok(Self::Heat),
            "tanh_flux" => Ok(Self::TanhFlux { speed: 2.0 }),
            "hjb" => Ok(Self::Hjb { epsilon: 0.2 }),
            other => Err(Error::Config(format!(
                "unknown operator `{other}` (expected heat | tanh_flux | hjb)"
            ))),
        }
    }
}

impl OperatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Heat => "heat",
            Self::TanhFlux { .. } => "tanh_flux",
            Self::Hjb { .. } => "hjb",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Hjb { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => Err(Error::Config(
                format!("hjb epsilon must be positive, got {epsilon}"),
            )),
            Self::TanhFlux { speed } if !speed.is_finite() => {
                Err(Error::Config(format!("tanh_flux speed must be finite, got {speed}")))
            }
            _ => Ok(()),
        }
    }

    /// Highest spatial derivative order `F` needs.
    pub fn derivative_order(&self) -> usize {
        match self {
            Self::TanhFlux { .. } => 1,
            Self::Heat | Self::Hjb { .. } => 2,
        }
    }

    /// Whether model time runs backward relative to physical time.
    pub fn time_reversed(&self) -> bool {
        matches!(self, Self::Hjb { .. })
    }

    pub fn check_pairing(&self, model: &ModelSpec) -> Result<()> {
        self.validate()?;
        model.validate()?;
        if self.derivative_order() > model.max_derivative_order() {
            return Err(Error::Unsupported(format!(
                "{} needs derivatives of order {} but {:?} provides {}",
                self.name(),
                self.derivative_order(),
                model.family,
                model.max_derivative_order()
            )));
        }
        Ok(())
    }

    /// `F[u]` from a precomputed jet.
    pub fn from_jet<S: Scalar>(&self, jet: &Jet<S>) -> S {
        match *self {
            Self::Heat => jet.laplacian,
            Self::TanhFlux { speed } => {
                let t = jet.value.tanh();
                let div = jet.grad.iter().skip(1).fold(jet.grad[0], |acc, g| acc + *g);
                (-(t * t) + 1.0) * div * speed
            }
            Self::Hjb { epsilon } => {
                jet.laplacian * epsilon - S::dot(&jet.grad, &jet.grad) * 0.5
            }
        }
    }

    /// `F[u_θ](x)` for any scalar type.
    pub fn rhs<S: Scalar>(&self, model: &ModelSpec, theta: &[S], x: &[S]) -> S {
        self.from_jet(&model.jet(theta, x))
    }

    pub fn apply(&self, model: &ModelSpec, theta: &[f64], x: &[f64]) -> Result<f64> {
        self.check_pairing(model)?;
        model.check_params(theta)?;
        model.check_point(x)?;
        Ok(self.rhs(model, theta, x))
    }
}

/// HJB right-hand side in physical time, `∂ₜu = −εΔu + ½|∇u|²`.
pub fn hjb_backward_rhs(epsilon: f64, jet: &Jet<f64>) -> f64 {
    -epsilon * jet.laplacian + 0.5 * jet.grad.iter().map(|g| g * g).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heat_at_gaussian_peak() {
        let model = ModelSpec::gaussian_mixture(2, 1);
        let theta = [0.6, 1.5, -0.5, 0.2, 0.3];
        let v = OperatorSpec::Heat.apply(&model, &theta, &[0.2, 0.3]).unwrap();
        assert!((v - (-0.6 * (2.25 + 0.25))).abs() < 1e-14);
    }

    #[test]
    fn hjb_of_zero_function() {
        let model = ModelSpec::gaussian_mixture(3, 2);
        let mut theta = vec![0.5; model.n_params()];
        theta[..2].copy_from_slice(&[0.0, 0.0]);
        let op = OperatorSpec::Hjb { epsilon: 0.2 };
        assert_eq!(op.apply(&model, &theta, &[0.1, 0.2, 0.3]).unwrap(), 0.0);
    }

    #[test]
    fn tanh_flux_of_constant() {
        // c·tanh(0·sin − b) is constant in x.
        let model = ModelSpec::periodic_sine_tanh(2, 1);
        let theta = [0.3, -0.2, 0.0, 0.0, 0.7, 1.3];
        let op = OperatorSpec::TanhFlux { speed: 2.0 };
        assert_eq!(op.apply(&model, &theta, &[0.4, 0.9]).unwrap(), 0.0);
    }

    #[test]
    fn heat_is_the_laplacian() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ModelSpec::periodic_sine_tanh(3, 4);
        for _ in 0..20 {
            let theta: Vec<f64> = (0..model.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = OperatorSpec::Heat.apply(&model, &theta, &x).unwrap();
            assert_eq!(f, model.laplacian(&theta, &x).unwrap());
        }
    }

    #[test]
    fn hjb_recomposes_from_model_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = ModelSpec::gaussian_mixture(2, 3);
        let eps = 0.2;
        let op = OperatorSpec::Hjb { epsilon: eps };
        for _ in 0..20 {
            let theta: Vec<f64> = (0..model.n_params()).map(|_| rng.random_range(-1.5..1.5)).collect();
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lap = model.laplacian(&theta, &x).unwrap();
            let g = model.grad_x(&theta, &x).unwrap();
            let expect = eps * lap - 0.5 * g.iter().map(|v| v * v).sum::<f64>();
            assert!((op.apply(&model, &theta, &x).unwrap() - expect).abs() < 1e-12);
            let back = hjb_backward_rhs(eps, &model.jet(&theta, &x));
            assert!((back + expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tanh_flux_linearizes_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ModelSpec::periodic_sine_tanh(2, 3);
        let op = OperatorSpec::TanhFlux { speed: 2.0 };
        for _ in 0..20 {
            let mut theta: Vec<f64> = (0..model.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c = model.block("c").unwrap();
            theta[c.range()].iter_mut().for_each(|v| *v *= 1e-7);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = model.grad_x(&theta, &x).unwrap();
            let lin = 2.0 * g.iter().sum::<f64>();
            let f = op.apply(&model, &theta, &x).unwrap();
            assert!((f - lin).abs() <= 1e-5 * lin.abs().max(1e-300));
        }
    }

    #[test]
    fn parses_config_names() {
        assert_eq!("heat".parse::<OperatorSpec>().unwrap(), OperatorSpec::Heat);
        assert!(matches!("hjb".parse::<OperatorSpec>().unwrap(), OperatorSpec::Hjb { .. }));
        assert!("wave".parse::<OperatorSpec>().is_err());
        assert!(OperatorSpec::Hjb { epsilon: 0.0 }.validate().is_err());
    }
}
