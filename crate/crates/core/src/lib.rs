//! Learned control fields on the parameter space of reduced-order models.
//!
//! A reduced-order model `u_θ` is evolved by the parameter ODE `θ̇ = V_ξ(θ)`;
//! the field `V_ξ` is trained so that `u_{θ(t)}` tracks the solution of an
//! evolution PDE `∂ₜu = F[u]` for any initial condition representable by the
//! model. Once trained, solving the PDE for a new initial condition costs one
//! model fit plus one ODE integration.

pub mod autodiff;
pub mod control;
pub mod error;
pub mod odesolve;
pub mod optim;
pub mod oracle;
pub mod par;
pub mod pde;
pub mod rom;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
