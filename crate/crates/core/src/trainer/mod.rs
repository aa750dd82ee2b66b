//! Learning the control parameters `ξ`: trajectory-based training on the
//! accumulated residual (optionally augmented with terminal misfits against
//! marched targets) and the pointwise nonlinear least-squares baseline.

mod adjoint;
mod residual;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::odesolve::{SolverKind, SolverSpec};
use crate::optim::{Adam, AdamConfig};
use crate::par::{self, ExecMode};
use crate::rom::ModelSpec;
use crate::sampling::{XBatch, XSampler};

pub use crate::oracle::TargetSet;
pub use adjoint::{AugmentedState, Dynamics};
pub use residual::{residual_generic, ResidualModel, ResidualNorm};

/// Floor on the target norm in the relative terminal misfit.
pub const MISFIT_FLOOR: f64 = 1e-8;

/// Which backward pass produces `∇_ξ ℓ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    #[default]
    Adjoint,
    Unrolled,
}

/// Stop when the mean loss over the last `window` iterations improved on the
/// preceding window by less than `min_decrease_pct` percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub enabled: bool,
    pub window: usize,
    pub min_decrease_pct: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            enabled: true,
            window: 20,
            min_decrease_pct: 0.1,
        }
    }
}

impl StopRule {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    fn triggered(&self, losses: &[f64]) -> bool {
        let w = self.window;
        if !self.enabled || w == 0 || losses.len() < 2 * w {
            return false;
        }
        let n = losses.len();
        let cur = mean(&losses[n - w..]);
        let prev = mean(&losses[n - 2 * w..n - w]);
        prev > 0.0 && 100.0 * (prev - cur) / prev < self.min_decrease_pct
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from the base rate to `final_fraction` of it at `max_iters`.
    Cosine { final_fraction: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, iteration: usize, max_iters: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { final_fraction } => {
                let p = (iteration as f64 / max_iters.max(1) as f64).min(1.0);
                base * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Trajectories per optimizer step (`K`).
    pub batch_size: usize,
    /// Monte-Carlo points per residual evaluation (`N`).
    pub n_points: usize,
    pub horizon: f64,
    pub solver: SolverSpec,
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    pub max_iters: usize,
    pub stop: StopRule,
    /// Optional early stop once the loss falls below this value.
    pub tolerance: Option<f64>,
    pub aug_weight: f64,
    /// Target pairs per step for the augmentation term.
    pub aug_batch: usize,
    /// Defaults to [`XSampler::default_for`] the model.
    pub x_sampler: Option<XSampler>,
    pub gradient: GradientMethod,
    /// Rescale the gradient to at most this Euclidean norm.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            n_points: 64,
            horizon: 0.1,
            solver: SolverSpec::rk4(20),
            adam: AdamConfig::default(),
            schedule: LrSchedule::Constant,
            max_iters: 10_000,
            stop: StopRule::default(),
            tolerance: None,
            aug_weight: 1.0,
            aug_batch: 8,
            x_sampler: None,
            gradient: GradientMethod::Adjoint,
            clip_norm: None,
            seed: 0,
            exec: ExecMode::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.n_points == 0 {
            return bad("n_points must be at least 1");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if !(self.adam.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.aug_weight < 0.0 {
            return bad("aug_weight must be nonnegative");
        }
        if self.gradient == GradientMethod::Unrolled && self.solver.kind == SolverKind::Dopri5 {
            return bad("unrolled gradients need a fixed-step solver");
        }
        self.solver.validate()?;
        if let Some(s) = &self.x_sampler {
            s.validate()?;
        }
        Ok(())
    }

    fn sampler(&self, model: &ModelSpec) -> XSampler {
        self.x_sampler.clone().unwrap_or_else(|| XSampler::default_for(model))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub traj_loss: f64,
    pub aug_loss: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    /// The moving-average decrease fell below the threshold.
    Converged,
    /// The loss fell below the configured tolerance.
    Tolerance,
    /// The loss or gradient became non-finite; `xi` holds the last good value.
    Diverged { iteration: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub xi: Vec<f64>,
    pub history: Vec<LogRow>,
    pub stop: StopReason,
}

impl TrainReport {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    /// Mean loss over the `window` iterations ending at `end` (exclusive).
    pub fn moving_average(&self, window: usize, end: usize) -> Option<f64> {
        if window == 0 || end < window || end > self.history.len() {
            return None;
        }
        Some(self.history[end - window..end].iter().map(|r| r.loss).sum::<f64>() / window as f64)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.loss)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_log_csv(path, &self.history)
    }
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,loss,traj_loss,aug_loss,grad_norm,wall_time")?;
    for r in rows {
        writeln!(
            f,
            "{},{:e},{:e},{:e},{:e},{:.6}",
            r.iteration, r.loss, r.traj_loss, r.aug_loss, r.grad_norm, r.wall_time
        )?;
    }
    f.flush()?;
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative terminal misfit `∫(u_θ − u_θ̄)² / max(∫u_θ̄², floor)` on `batch`,
/// with its gradient in `θ`.
pub fn terminal_misfit(model: &ModelSpec, theta: &[f64], target: &[f64], batch: &XBatch) -> (f64, Vec<f64>) {
    let m = theta.len();
    let n = batch.len() as f64;
    let mut grad = vec![0.0; m];
    let mut row = vec![0.0; m];
    let (mut num, mut den) = (0.0, 0.0);
    for (x, w) in batch.iter() {
        let u = model.grad_theta_into(theta, x, &mut row);
        let ubar = model.value(target, x);
        let diff = u - ubar;
        num += w * diff * diff / n;
        den += w * ubar * ubar / n;
        for i in 0..m {
            grad[i] += 2.0 * w * diff * row[i] / n;
        }
    }
    let den = den.max(MISFIT_FLOOR);
    grad.iter_mut().for_each(|g| *g /= den);
    (num / den, grad)
}

/// Loss and `∇_ξ` contribution of one trajectory.
struct Contribution {
    loss: f64,
    grad: Vec<f64>,
}

fn trajectory_contribution(
    dynamics: &Dynamics,
    config: &TrainConfig,
    xi: &[f64],
    theta0: &[f64],
    batch: &XBatch,
    target: Option<&[f64]>,
) -> Result<Contribution> {
    let with_cost = target.is_none();
    let traj = dynamics.rollout(xi, theta0, batch, config.horizon, &config.solver, with_cost)?;
    let m = dynamics.dim();
    let (loss, lambda_theta, lambda_s) = match target {
        None => (traj.last()[m], vec![0.0; m], 1.0),
        Some(tbar) => {
            let (misfit, g) = terminal_misfit(&dynamics.residual.model, &traj.last()[..m], tbar, batch);
            (misfit, g, 0.0)
        }
    };
    let (grad, _) = match config.gradient {
        GradientMethod::Adjoint => {
            dynamics.adjoint_gradient(xi, &traj, batch, &config.solver, &lambda_theta, lambda_s)?
        }
        GradientMethod::Unrolled => {
            dynamics.unrolled_gradient(xi, &traj, batch, &config.solver, &lambda_theta, lambda_s)?
        }
    };
    Ok(Contribution { loss, grad })
}

/// Loss and gradient of the minibatch objective
/// `(1/K) Σ s_k(T) + w · (1/K_a) Σ misfit_j` for given initials and targets.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_and_gradient(
    dynamics: &Dynamics,
    config: &TrainConfig,
    xi: &[f64],
    initials: &[(Vec<f64>, XBatch)],
    targets: &[(Vec<f64>, Vec<f64>, XBatch)],
) -> Result<(f64, f64, Vec<f64>)> {
    let np = xi.len();
    let traj: Vec<Result<Contribution>> = par::map(config.exec, initials, |(th, batch)| {
        trajectory_contribution(dynamics, config, xi, th, batch, None)
    });
    let aug: Vec<Result<Contribution>> = par::map(config.exec, targets, |(th, tbar, batch)| {
        trajectory_contribution(dynamics, config, xi, th, batch, Some(tbar))
    });
    let mut grad = vec![0.0; np];
    let mut traj_loss = 0.0;
    let k = initials.len().max(1) as f64;
    for c in traj {
        let c = c?;
        traj_loss += c.loss / k;
        for (g, v) in grad.iter_mut().zip(&c.grad) {
            *g += v / k;
        }
    }
    let mut aug_loss = 0.0;
    if !targets.is_empty() {
        let ka = targets.len() as f64;
        let w = config.aug_weight;
        for c in aug {
            let c = c?;
            aug_loss += c.loss / ka;
            for (g, v) in grad.iter_mut().zip(&c.grad) {
                *g += w * v / ka;
            }
        }
    }
    Ok((traj_loss, aug_loss, grad))
}

fn draw_batch(
    sampler: &XSampler,
    model: &ModelSpec,
    theta: &[f64],
    shared: Option<&XBatch>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<XBatch> {
    match shared {
        Some(b) => Ok(b.clone()),
        None => sampler.sample(model, Some(theta), n, rng),
    }
}

fn draw_indices(rng: &mut ChaCha8Rng, len: usize, amount: usize) -> Vec<usize> {
    if amount >= len {
        (0..len).collect()
    } else {
        let mut idx = index::sample(rng, len, amount).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Trains `ξ` from `xi` on the pool of initial parameters `initials`
/// (`M = initials.len()`), optionally with a target set for the
/// augmentation term. `on_iter` sees every log row and the current `ξ`.
pub fn train(
    config: &TrainConfig,
    dynamics: &Dynamics,
    xi: Vec<f64>,
    initials: &[Vec<f64>],
    targets: Option<&TargetSet>,
    mut on_iter: Option<&mut dyn FnMut(&LogRow, &[f64])>,
) -> Result<TrainReport> {
    config.validate()?;
    if initials.is_empty() {
        return Err(Error::Config("the pool of initial parameters is empty".into()));
    }
    if xi.len() != dynamics.net.n_params() {
        return Err(Error::Dimension {
            what: "control parameters".into(),
            expected: dynamics.net.n_params(),
            got: xi.len(),
        });
    }
    let model = &dynamics.residual.model;
    for th in initials {
        model.check_params(th)?;
    }
    let targets: Vec<(Vec<f64>, Vec<f64>)> = targets
        .map(|t| {
            t.pairs
                .iter()
                .map(|(a, b)| (a.values.clone(), b.values.clone()))
                .collect()
        })
        .unwrap_or_default();
    for (a, b) in &targets {
        model.check_params(a)?;
        model.check_params(b)?;
    }
    let use_aug = !targets.is_empty() && config.aug_weight > 0.0 && config.aug_batch > 0;
    let sampler = config.sampler(model);
    let per_theta = sampler.depends_on_params();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam, xi.len());
    let mut xi = xi;
    let mut history: Vec<LogRow> = Vec::new();
    let mut losses = Vec::new();
    let start = Instant::now();
    let k = config.batch_size.min(initials.len());

    for it in 0..config.max_iters {
        let shared = if per_theta {
            None
        } else {
            Some(sampler.sample(model, None, config.n_points, &mut rng)?)
        };
        let mut batch_init = Vec::with_capacity(k);
        for i in draw_indices(&mut rng, initials.len(), k) {
            let th = initials[i].clone();
            let b = draw_batch(&sampler, model, &th, shared.as_ref(), config.n_points, &mut rng)?;
            batch_init.push((th, b));
        }
        let mut batch_aug = Vec::new();
        if use_aug {
            for j in draw_indices(&mut rng, targets.len(), config.aug_batch) {
                let (a, b) = &targets[j];
                let xb = draw_batch(&sampler, model, b, shared.as_ref(), config.n_points, &mut rng)?;
                batch_aug.push((a.clone(), b.clone(), xb));
            }
        }

        let outcome = batch_loss_and_gradient(dynamics, config, &xi, &batch_init, &batch_aug);
        let (traj_loss, aug_loss, mut grad) = match outcome {
            Ok(v) => v,
            Err(e @ Error::NonFinite { .. }) => {
                return Ok(TrainReport {
                    xi,
                    history,
                    stop: StopReason::Diverged {
                        iteration: it,
                        reason: e.to_string(),
                    },
                });
            }
            Err(e) => return Err(e),
        };
        let loss = traj_loss + config.aug_weight * aug_loss;
        let grad_norm = norm(&grad);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Ok(TrainReport {
                xi,
                history,
                stop: StopReason::Diverged {
                    iteration: it,
                    reason: format!("loss {loss}, gradient norm {grad_norm}"),
                },
            });
        }
        if let Some(c) = config.clip_norm {
            if grad_norm > c {
                grad.iter_mut().for_each(|g| *g *= c / grad_norm);
            }
        }
        adam.config.lr = config.schedule.rate(config.adam.lr, it, config.max_iters);
        adam.step(&mut xi, &grad);

        let row = LogRow {
            iteration: it,
            loss,
            traj_loss,
            aug_loss,
            grad_norm,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if let Some(cb) = on_iter.as_mut() {
            cb(&row, &xi);
        }
        history.push(row);
        losses.push(loss);

        if config.tolerance.is_some_and(|tol| loss < tol) {
            return Ok(TrainReport {
                xi,
                history,
                stop: StopReason::Tolerance,
            });
        }
        if config.stop.triggered(&losses) {
            return Ok(TrainReport {
                xi,
                history,
                stop: StopReason::Converged,
            });
        }
    }
    Ok(TrainReport {
        xi,
        history,
        stop: StopReason::MaxIters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlsConfig {
    /// Parameter points per optimizer step.
    pub batch_size: usize,
    pub n_points: usize,
    pub adam: AdamConfig,
    pub schedule: LrSchedule,
    pub max_iters: usize,
    pub x_sampler: Option<XSampler>,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for NlsConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            n_points: 64,
            adam: AdamConfig::default(),
            schedule: LrSchedule::Constant,
            max_iters: 10_000,
            x_sampler: None,
            clip_norm: None,
            seed: 0,
            exec: ExecMode::Parallel,
        }
    }
}

/// Mean running cost `(1/B) Σ r(θ_b, V_ξ(θ_b))` and its `ξ`-gradient.
pub fn nls_loss_and_gradient(
    dynamics: &Dynamics,
    exec: ExecMode,
    xi: &[f64],
    points: &[(Vec<f64>, XBatch)],
) -> (f64, Vec<f64>) {
    let m = dynamics.dim();
    let parts: Vec<(f64, Vec<f64>)> = par::map(exec, points, |(th, batch)| {
        let mut ws = dynamics.residual.workspace();
        let mut v = vec![0.0; m];
        dynamics.velocity(xi, th, &mut v);
        let cost = dynamics.residual.cost_unchecked(th, &v, batch, &mut ws);
        let mut g_th = vec![0.0; m];
        let mut g_xi = vec![0.0; xi.len()];
        dynamics.augmented_vjp(xi, th, batch, &vec![0.0; m], 1.0, &mut ws, &mut g_th, &mut g_xi);
        (cost, g_xi)
    });
    let b = points.len().max(1) as f64;
    let mut grad = vec![0.0; xi.len()];
    let mut loss = 0.0;
    for (c, g) in parts {
        loss += c / b;
        for (a, v) in grad.iter_mut().zip(&g) {
            *a += v / b;
        }
    }
    (loss, grad)
}

/// Fits `ξ` by pointwise least squares of the residual over a fixed set of
/// parameter samples, with no trajectories.
pub fn nls_train(
    config: &NlsConfig,
    dynamics: &Dynamics,
    xi: Vec<f64>,
    thetas: &[Vec<f64>],
    mut on_iter: Option<&mut dyn FnMut(&LogRow, &[f64])>,
) -> Result<TrainReport> {
    if thetas.is_empty() {
        return Err(Error::Config("the parameter sample set is empty".into()));
    }
    if config.n_points == 0 {
        return Err(Error::EmptyBatch);
    }
    if config.batch_size == 0 || config.max_iters == 0 {
        return Err(Error::Config("batch_size and max_iters must be at least 1".into()));
    }
    let model = &dynamics.residual.model;
    for th in thetas {
        model.check_params(th)?;
    }
    let sampler = config
        .x_sampler
        .clone()
        .unwrap_or_else(|| XSampler::default_for(model));
    sampler.validate()?;
    let per_theta = sampler.depends_on_params();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam, xi.len());
    let mut xi = xi;
    let mut history = Vec::new();
    let start = Instant::now();
    let b = config.batch_size.min(thetas.len());
    for it in 0..config.max_iters {
        let shared = if per_theta {
            None
        } else {
            Some(sampler.sample(model, None, config.n_points, &mut rng)?)
        };
        let mut points = Vec::with_capacity(b);
        for _ in 0..b {
            let th = thetas[rng.random_range(0..thetas.len())].clone();
            let batch = draw_batch(&sampler, model, &th, shared.as_ref(), config.n_points, &mut rng)?;
            points.push((th, batch));
        }
        let (loss, mut grad) = nls_loss_and_gradient(dynamics, config.exec, &xi, &points);
        let grad_norm = norm(&grad);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Ok(TrainReport {
                xi,
                history,
                stop: StopReason::Diverged {
                    iteration: it,
                    reason: format!("loss {loss}, gradient norm {grad_norm}"),
                },
            });
        }
        if let Some(c) = config.clip_norm {
            if grad_norm > c {
                grad.iter_mut().for_each(|g| *g *= c / grad_norm);
            }
        }
        adam.config.lr = config.schedule.rate(config.adam.lr, it, config.max_iters);
        adam.step(&mut xi, &grad);
        let row = LogRow {
            iteration: it,
            loss,
            traj_loss: loss,
            aug_loss: 0.0,
            grad_norm,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if let Some(cb) = on_iter.as_mut() {
            cb(&row, &xi);
        }
        history.push(row);
    }
    Ok(TrainReport {
        xi,
        history,
        stop: StopReason::MaxIters,
    })
}

#[cfg(test)]
mod tests;
