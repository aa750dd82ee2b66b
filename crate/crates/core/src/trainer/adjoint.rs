//! Controlled rollouts of the augmented state `γ = [θ; s]` and the two
//! gradient paths: the continuous adjoint and backpropagation through the
//! unrolled fixed-step solver.

use crate::autodiff::Workspace;
use crate::control::{ControlNet, NetCache};
use crate::error::{Error, Result};
use crate::odesolve::{self, SolverKind, SolverSpec, Trajectory};
use crate::sampling::XBatch;

use super::residual::ResidualModel;

/// Parameter vector plus accumulated running cost.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub theta: Vec<f64>,
    pub s: f64,
}

impl AugmentedState {
    pub fn start(theta: Vec<f64>) -> Self {
        Self { theta, s: 0.0 }
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let (s, theta) = flat.split_last().expect("nonempty augmented state");
        Self {
            theta: theta.to_vec(),
            s: *s,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.theta.clone();
        v.push(self.s);
        v
    }
}

/// `θ̇ = V_ξ(θ)`, `ṡ = r(θ, V_ξ(θ))` for one model, operator and control net.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub residual: ResidualModel,
    pub net: ControlNet,
}

impl Dynamics {
    pub fn new(residual: ResidualModel, net: ControlNet) -> Result<Self> {
        let m = residual.model.n_params();
        if net.spec.dim != m {
            return Err(Error::Dimension {
                what: "control net dimension".into(),
                expected: m,
                got: net.spec.dim,
            });
        }
        Ok(Self { residual, net })
    }

    pub fn dim(&self) -> usize {
        self.net.spec.dim
    }

    pub fn velocity(&self, xi: &[f64], theta: &[f64], out: &mut [f64]) {
        let mut cache = NetCache::default();
        self.net.forward(xi, theta, out, &mut cache);
    }

    /// Augmented right-hand side. With `with_cost == false` the `s`
    /// component is left at zero (no residual evaluation).
    pub fn augmented_rhs(
        &self,
        xi: &[f64],
        batch: &XBatch,
        with_cost: bool,
        y: &[f64],
        out: &mut [f64],
        ws: &mut Workspace,
    ) {
        let m = self.dim();
        let (theta, _) = y.split_at(m);
        let (v, s_dot) = out.split_at_mut(m);
        self.velocity(xi, theta, v);
        s_dot[0] = if with_cost {
            self.residual.cost_unchecked(theta, v, batch, ws)
        } else {
            0.0
        };
    }

    /// Pulls the cotangent `(c_θ, c_s)` of `[V; r]` back through one
    /// evaluation at `θ`: adds into `g_theta` and `g_xi`.
    #[allow(clippy::too_many_arguments)]
    pub fn augmented_vjp(
        &self,
        xi: &[f64],
        theta: &[f64],
        batch: &XBatch,
        c_theta: &[f64],
        c_s: f64,
        ws: &mut Workspace,
        g_theta: &mut [f64],
        g_xi: &mut [f64],
    ) {
        let m = self.dim();
        let mut v = vec![0.0; m];
        let mut cache = NetCache::default();
        self.net.forward(xi, theta, &mut v, &mut cache);
        let mut cot = c_theta.to_vec();
        if c_s != 0.0 {
            self.residual
                .cost_vjp_unchecked(theta, &v, batch, c_s, ws, g_theta, &mut cot);
        }
        self.net.backward(xi, theta, &cot, &cache, g_theta, g_xi);
    }

    fn check(&self, xi: &[f64], theta0: &[f64], batch: &XBatch) -> Result<()> {
        if xi.len() != self.net.n_params() {
            return Err(Error::Dimension {
                what: "control parameters".into(),
                expected: self.net.n_params(),
                got: xi.len(),
            });
        }
        self.residual.model.check_params(theta0)?;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(())
    }

    /// Integrates `γ` from `[θ₀; 0]` over `[0, t_end]`. States are flat
    /// `[θ, s]` vectors.
    pub fn rollout(
        &self,
        xi: &[f64],
        theta0: &[f64],
        batch: &XBatch,
        t_end: f64,
        solver: &SolverSpec,
        with_cost: bool,
    ) -> Result<Trajectory> {
        self.check(xi, theta0, batch)?;
        let mut ws = self.residual.workspace();
        let y0 = AugmentedState::start(theta0.to_vec()).to_flat();
        odesolve::integrate(
            |_, y: &[f64], out: &mut [f64]| self.augmented_rhs(xi, batch, with_cost, y, out, &mut ws),
            &y0,
            0.0,
            t_end,
            solver,
        )
        .map_err(|e| match e {
            Error::NonFinite { t, .. } => Error::NonFinite {
                context: "trajectory escaped (non-finite parameters)".into(),
                t,
            },
            other => other,
        })
    }

    fn rk4_half_replay(&self, xi: &[f64], theta: &[f64], h: f64) -> Vec<f64> {
        let m = self.dim();
        let mut k1 = vec![0.0; m];
        self.velocity(xi, theta, &mut k1);
        let mut field = |_: f64, y: &[f64], out: &mut [f64]| self.velocity(xi, y, out);
        odesolve::rk4_step(&mut field, 0.0, theta, &k1, h)
    }

    /// Continuous adjoint on the rollout's grid. `lambda_theta` is
    /// `∂ℓ/∂θ(T)` and `lambda_s` is `∂ℓ/∂s(T)`. Returns `(∂ℓ/∂ξ, ∂ℓ/∂θ(0))`.
    ///
    /// The adjoint `λ̇ = −(∂f/∂θ)ᵀλ` runs backward with the forward method;
    /// the midpoint states RK4 needs are replayed from the stored step start.
    pub fn adjoint_gradient(
        &self,
        xi: &[f64],
        traj: &Trajectory,
        batch: &XBatch,
        solver: &SolverSpec,
        lambda_theta: &[f64],
        lambda_s: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = self.dim();
        let mut ws = self.residual.workspace();
        let mut lambda = lambda_theta.to_vec();
        let mut g_xi = vec![0.0; self.net.n_params()];
        let mut pull = |theta: &[f64], lam: &[f64], g_th: &mut Vec<f64>, g_x: &mut Vec<f64>| {
            g_th.iter_mut().for_each(|v| *v = 0.0);
            g_x.iter_mut().for_each(|v| *v = 0.0);
            self.augmented_vjp(xi, theta, batch, lam, lambda_s, &mut ws, g_th, g_x);
        };
        let mut a = vec![vec![0.0; m]; 4];
        let mut b = vec![vec![0.0; xi.len()]; 4];
        for k in (0..traj.times.len() - 1).rev() {
            let h = traj.times[k + 1] - traj.times[k];
            let th0 = &traj.states[k][..m];
            let th1 = &traj.states[k + 1][..m];
            match solver.kind {
                SolverKind::Euler => {
                    // Exact discrete adjoint of the forward Euler step.
                    pull(th0, &lambda, &mut a[0], &mut b[0]);
                    for i in 0..m {
                        lambda[i] += h * a[0][i];
                    }
                    for (g, v) in g_xi.iter_mut().zip(&b[0]) {
                        *g += h * v;
                    }
                }
                _ => {
                    let mid = self.rk4_half_replay(xi, th0, 0.5 * h);
                    pull(th1, &lambda, &mut a[0], &mut b[0]);
                    let l2: Vec<f64> = (0..m).map(|i| lambda[i] + 0.5 * h * a[0][i]).collect();
                    pull(&mid, &l2, &mut a[1], &mut b[1]);
                    let l3: Vec<f64> = (0..m).map(|i| lambda[i] + 0.5 * h * a[1][i]).collect();
                    pull(&mid, &l3, &mut a[2], &mut b[2]);
                    let l4: Vec<f64> = (0..m).map(|i| lambda[i] + h * a[2][i]).collect();
                    pull(th0, &l4, &mut a[3], &mut b[3]);
                    for i in 0..m {
                        lambda[i] += h / 6.0 * (a[0][i] + 2.0 * a[1][i] + 2.0 * a[2][i] + a[3][i]);
                    }
                    for (j, g) in g_xi.iter_mut().enumerate() {
                        *g += h / 6.0 * (b[0][j] + 2.0 * b[1][j] + 2.0 * b[2][j] + b[3][j]);
                    }
                }
            }
            if lambda.iter().chain(&g_xi).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "adjoint backward pass".into(),
                    t: traj.times[k],
                });
            }
        }
        Ok((g_xi, lambda))
    }

    /// Reverse-mode differentiation of the fixed-step solver itself, with
    /// stage states replayed from the stored step starts. Returns
    /// `(∂ℓ/∂ξ, ∂ℓ/∂θ(0))` for the discrete loss.
    pub fn unrolled_gradient(
        &self,
        xi: &[f64],
        traj: &Trajectory,
        batch: &XBatch,
        solver: &SolverSpec,
        lambda_theta: &[f64],
        lambda_s: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if solver.kind == SolverKind::Dopri5 {
            return Err(Error::Unsupported(
                "unrolled gradients need a fixed-step solver".into(),
            ));
        }
        let m = self.dim();
        let np = self.net.n_params();
        let mut ws = self.residual.workspace();
        let mut ybar = lambda_theta.to_vec();
        let mut g_xi = vec![0.0; np];
        let mut g_th = vec![0.0; m];
        for k in (0..traj.times.len() - 1).rev() {
            let h = traj.times[k + 1] - traj.times[k];
            let th0 = &traj.states[k][..m];
            match solver.kind {
                SolverKind::Euler => {
                    let c: Vec<f64> = ybar.iter().map(|v| h * v).collect();
                    g_th.iter_mut().for_each(|v| *v = 0.0);
                    self.augmented_vjp(xi, th0, batch, &c, h * lambda_s, &mut ws, &mut g_th, &mut g_xi);
                    for i in 0..m {
                        ybar[i] += g_th[i];
                    }
                }
                _ => {
                    // Replay stages Y1..Y4.
                    let mut stages = vec![th0.to_vec()];
                    let mut kv = vec![0.0; m];
                    self.velocity(xi, th0, &mut kv);
                    for (j, frac) in [0.5, 0.5, 1.0].into_iter().enumerate() {
                        let y: Vec<f64> = (0..m).map(|i| th0[i] + frac * h * kv[i]).collect();
                        if j < 2 {
                            self.velocity(xi, &y, &mut kv);
                        }
                        stages.push(y);
                    }
                    let w = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
                    // Stage cotangents k̄ (θ part) accumulate from later stages.
                    let mut kbar: Vec<Vec<f64>> = w.iter().map(|&wi| ybar.iter().map(|v| wi * v).collect()).collect();
                    let ks: Vec<f64> = w.iter().map(|&wi| wi * lambda_s).collect();
                    let mut ynext = ybar.clone();
                    for stage in (0..4).rev() {
                        g_th.iter_mut().for_each(|v| *v = 0.0);
                        self.augmented_vjp(
                            xi,
                            &stages[stage],
                            batch,
                            &kbar[stage],
                            ks[stage],
                            &mut ws,
                            &mut g_th,
                            &mut g_xi,
                        );
                        for i in 0..m {
                            ynext[i] += g_th[i];
                        }
                        if stage > 0 {
                            let coeff = if stage == 3 { h } else { 0.5 * h };
                            for i in 0..m {
                                kbar[stage - 1][i] += coeff * g_th[i];
                            }
                        }
                    }
                    ybar = ynext;
                }
            }
            if ybar.iter().chain(&g_xi).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "unrolled backward pass".into(),
                    t: traj.times[k],
                });
            }
        }
        Ok((g_xi, ybar))
    }
}
