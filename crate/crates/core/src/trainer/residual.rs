//! The pointwise residual `e(θ, v, x) = ∇_θu_θ(x)·v − F[u_θ](x)` and the
//! Monte-Carlo running cost `r = (1/N) Σ wₙ e(θ, v, xₙ)²`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Recorder, Scalar, Tape, Workspace};
use crate::error::{Error, Result};
use crate::pde::OperatorSpec;
use crate::rom::ModelSpec;
use crate::sampling::XBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualNorm {
    /// `‖e‖²` only.
    #[default]
    L2,
    /// `‖e‖² + ‖∇ₓe‖²`.
    H1,
}

/// `e(θ, v, x)` for any scalar type. The directional derivative comes from
/// a forward-mode pass with tangent `v` on `θ`.
pub fn residual_generic<S: Scalar>(
    model: &ModelSpec,
    op: &OperatorSpec,
    theta: &[S],
    v: &[S],
    x: &[S],
) -> S {
    let th: Vec<Dual<S>> = theta.iter().zip(v).map(|(&t, &d)| Dual::new(t, d)).collect();
    let xd: Vec<Dual<S>> = x.iter().map(|&xi| Dual::constant(xi)).collect();
    let directional = model.value(&th, &xd).tangent;
    directional - op.rhs(model, theta, x)
}

/// Residual evaluation for one `(model, operator)` pair. The reverse pass runs
/// on a tape recorded once at construction with inputs `theta`, `v`, `x`.
#[derive(Debug, Clone)]
pub struct ResidualModel {
    pub model: ModelSpec,
    pub op: OperatorSpec,
    pub norm: ResidualNorm,
    tape: Tape,
}

impl ResidualModel {
    pub fn new(model: ModelSpec, op: OperatorSpec, norm: ResidualNorm) -> Result<Self> {
        op.check_pairing(&model)?;
        let (m, d) = (model.n_params(), model.dim);
        let rec = Recorder::new();
        let th = rec.input("theta", m);
        let v = rec.input("v", m);
        let x = rec.input("x", d);
        let mut outputs = vec![residual_generic(&model, &op, &th, &v, &x)];
        if norm == ResidualNorm::H1 {
            let thd: Vec<Dual<_>> = th.iter().map(|&t| Dual::constant(t)).collect();
            let vd: Vec<Dual<_>> = v.iter().map(|&t| Dual::constant(t)).collect();
            for j in 0..d {
                let xd: Vec<Dual<_>> = x
                    .iter()
                    .enumerate()
                    .map(|(i, &xi)| Dual::new(xi, if i == j { rec.constant(1.0) } else { rec.constant(0.0) }))
                    .collect();
                outputs.push(residual_generic(&model, &op, &thd, &vd, &xd).tangent);
            }
        }
        let tape = rec.finish(&outputs);
        Ok(Self {
            model,
            op,
            norm,
            tape,
        })
    }

    pub fn workspace(&self) -> Workspace {
        self.tape.workspace()
    }

    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }

    /// `e(θ, v, x)` from closed-form model derivatives; `row` is scratch of
    /// length `m`.
    pub fn residual_point(&self, theta: &[f64], v: &[f64], x: &[f64], row: &mut [f64]) -> f64 {
        self.model.grad_theta_into(theta, x, row);
        let directional: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
        directional - self.op.rhs(&self.model, theta, x)
    }

    fn check(&self, theta: &[f64], v: &[f64], batch: &XBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.model.check_params(theta)?;
        if v.len() != theta.len() {
            return Err(Error::Dimension {
                what: "velocity".into(),
                expected: theta.len(),
                got: v.len(),
            });
        }
        if batch.dim != self.model.dim {
            return Err(Error::Dimension {
                what: "x-batch dimension".into(),
                expected: self.model.dim,
                got: batch.dim,
            });
        }
        Ok(())
    }

    /// Running cost `r(θ, v)` on `batch`.
    pub fn cost(&self, theta: &[f64], v: &[f64], batch: &XBatch) -> Result<f64> {
        self.check(theta, v, batch)?;
        Ok(self.cost_unchecked(theta, v, batch, &mut self.workspace()))
    }

    pub(crate) fn cost_unchecked(&self, theta: &[f64], v: &[f64], batch: &XBatch, ws: &mut Workspace) -> f64 {
        let n = batch.len() as f64;
        match self.norm {
            ResidualNorm::L2 => {
                let mut row = vec![0.0; theta.len()];
                batch
                    .iter()
                    .map(|(x, w)| w * self.residual_point(theta, v, x, &mut row).powi(2))
                    .sum::<f64>()
                    / n
            }
            ResidualNorm::H1 => {
                let mut flat = Vec::with_capacity(self.tape.n_inputs());
                let mut acc = 0.0;
                for (x, w) in batch.iter() {
                    fill_inputs(&mut flat, theta, v, x);
                    self.tape.forward(ws, &flat);
                    let out = self.tape.outputs(ws);
                    acc += w * out.iter().map(|e| e * e).sum::<f64>();
                }
                acc / n
            }
        }
    }

    /// Adds `scale · ∂r/∂θ` (at fixed `v`) into `g_theta` and `scale · ∂r/∂v`
    /// into `g_v`; returns `r`.
    pub fn cost_vjp(
        &self,
        theta: &[f64],
        v: &[f64],
        batch: &XBatch,
        scale: f64,
        ws: &mut Workspace,
        g_theta: &mut [f64],
        g_v: &mut [f64],
    ) -> Result<f64> {
        self.check(theta, v, batch)?;
        Ok(self.cost_vjp_unchecked(theta, v, batch, scale, ws, g_theta, g_v))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn cost_vjp_unchecked(
        &self,
        theta: &[f64],
        v: &[f64],
        batch: &XBatch,
        scale: f64,
        ws: &mut Workspace,
        g_theta: &mut [f64],
        g_v: &mut [f64],
    ) -> f64 {
        let m = theta.len();
        let n = batch.len() as f64;
        let mut flat = Vec::with_capacity(self.tape.n_inputs());
        let mut grad = vec![0.0; self.tape.n_inputs()];
        let mut cot = vec![0.0; self.tape.n_outputs()];
        let mut cost = 0.0;
        for (x, w) in batch.iter() {
            fill_inputs(&mut flat, theta, v, x);
            self.tape.forward(ws, &flat);
            for (k, c) in cot.iter_mut().enumerate() {
                let e = self.tape.output(ws, k);
                cost += w * e * e;
                *c = scale * 2.0 * w * e / n;
            }
            self.tape.vjp_accumulate(ws, &cot, &mut grad);
        }
        for i in 0..m {
            g_theta[i] += grad[i];
            g_v[i] += grad[m + i];
        }
        cost / n
    }
}

fn fill_inputs(flat: &mut Vec<f64>, theta: &[f64], v: &[f64], x: &[f64]) {
    flat.clear();
    flat.extend_from_slice(theta);
    flat.extend_from_slice(v);
    flat.extend_from_slice(x);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::XSampler;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn uniform(model: &ModelSpec, n: usize, seed: u64) -> XBatch {
        XSampler::UniformBox { half_width: 1.0 }
            .sample(model, None, n, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
    }

    #[test]
    fn zero_field_and_zero_operator() {
        let model = ModelSpec::sine_series(1, 2);
        let r = ResidualModel::new(model, OperatorSpec::Heat, ResidualNorm::L2).unwrap();
        let batch = uniform(&model, 32, 1);
        assert_eq!(r.cost(&[0.0, 0.0], &[0.0, 0.0], &batch).unwrap(), 0.0);
    }

    #[test]
    fn exact_eigenmode_field_has_no_residual() {
        let model = ModelSpec::sine_series(1, 1);
        let r = ResidualModel::new(model, OperatorSpec::Heat, ResidualNorm::L2).unwrap();
        let batch = uniform(&model, 256, 2);
        for c in [0.5, 1.0, -2.0] {
            let cost = r.cost(&[c], &[-PI * PI * c], &batch).unwrap();
            assert!(cost < 1e-20, "{cost}");
        }
    }

    #[test]
    fn zero_velocity_cost_is_mean_square_rhs() {
        let model = ModelSpec::periodic_sine_tanh(2, 3);
        let r = ResidualModel::new(model, OperatorSpec::Heat, ResidualNorm::L2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta: Vec<f64> = (0..model.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch = uniform(&model, 64, 4);
        let direct = batch.integrate(|x| model.laplacian(&theta, x).unwrap().powi(2));
        let cost = r.cost(&theta, &vec![0.0; model.n_params()], &batch).unwrap();
        assert!((cost - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn tape_and_closed_form_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (model, op) in [
            (ModelSpec::periodic_sine_tanh(2, 3), OperatorSpec::TanhFlux { speed: 2.0 }),
            (ModelSpec::gaussian_mixture(2, 2), OperatorSpec::Hjb { epsilon: 0.2 }),
        ] {
            let r = ResidualModel::new(model, op, ResidualNorm::L2).unwrap();
            let m = model.n_params();
            let theta: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let batch = uniform(&model, 16, 6);
            let mut ws = r.workspace();
            let (mut gt, mut gv) = (vec![0.0; m], vec![0.0; m]);
            let via_tape = r.cost_vjp(&theta, &v, &batch, 1.0, &mut ws, &mut gt, &mut gv).unwrap();
            let closed = r.cost(&theta, &v, &batch).unwrap();
            assert!((via_tape - closed).abs() <= 1e-12 * closed.max(1e-300));
        }
    }

    #[test]
    fn cost_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for norm in [ResidualNorm::L2, ResidualNorm::H1] {
            let model = ModelSpec::periodic_sine_tanh(2, 2);
            let r = ResidualModel::new(model, OperatorSpec::TanhFlux { speed: 2.0 }, norm).unwrap();
            let m = model.n_params();
            let theta: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let batch = uniform(&model, 8, 8);
            let mut ws = r.workspace();
            let (mut gt, mut gv) = (vec![0.0; m], vec![0.0; m]);
            r.cost_vjp(&theta, &v, &batch, 1.0, &mut ws, &mut gt, &mut gv).unwrap();
            let h = 1e-6;
            for k in 0..m {
                let mut p = theta.clone();
                let mut q = theta.clone();
                p[k] += h;
                q[k] -= h;
                let fd = (r.cost(&p, &v, &batch).unwrap() - r.cost(&q, &v, &batch).unwrap()) / (2.0 * h);
                assert!((fd - gt[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{norm:?} θ[{k}]");
                let mut p = v.clone();
                let mut q = v.clone();
                p[k] += h;
                q[k] -= h;
                let fd = (r.cost(&theta, &p, &batch).unwrap() - r.cost(&theta, &q, &batch).unwrap()) / (2.0 * h);
                assert!((fd - gv[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{norm:?} v[{k}]");
            }
        }
    }

    #[test]
    fn h1_adds_gradient_term() {
        // u = c sin(πx): e = (v + π²c) sin(πx), ∂ₓe = π(v + π²c) cos(πx).
        let model = ModelSpec::sine_series(1, 1);
        let batch = uniform(&model, 4000, 9);
        let l2 = ResidualModel::new(model, OperatorSpec::Heat, ResidualNorm::L2).unwrap();
        let h1 = ResidualModel::new(model, OperatorSpec::Heat, ResidualNorm::H1).unwrap();
        let (c, v) = (1.0, 0.0);
        let a = v + PI * PI * c;
        let expect_l2 = batch.integrate(|x| (a * (PI * x[0]).sin()).powi(2));
        let expect_h1 = expect_l2 + batch.integrate(|x| (PI * a * (PI * x[0]).cos()).powi(2));
        assert!((l2.cost(&[c], &[v], &batch).unwrap() - expect_l2).abs() < 1e-10 * expect_l2);
        assert!((h1.cost(&[c], &[v], &batch).unwrap() - expect_h1).abs() < 1e-10 * expect_h1);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let model = ModelSpec::sine_series(1, 1);
        let r = ResidualModel::new(model, OperatorSpec::Heat, ResidualNorm::L2).unwrap();
        let batch = XBatch {
            dim: 1,
            points: vec![],
            weights: vec![],
        };
        assert!(matches!(r.cost(&[1.0], &[0.0], &batch), Err(Error::EmptyBatch)));
    }
}
