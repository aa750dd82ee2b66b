//! Scalar-graph differentiation: forward-mode duals, recorded tapes with
//! reverse-mode pullbacks, and their nesting (duals whose components live on a
//! tape) for differentiating directional derivatives.
//!
//! All arithmetic is `f64`. The derivative of ReLU at zero is zero.

mod dual;
mod scalar;
mod tape;

pub use dual::{jvp, Dual, DualScalar};
pub use scalar::Scalar;
pub use tape::{Gradients, Recorder, Tape, Var, Workspace};

pub(crate) use scalar::sigmoid_f64;
