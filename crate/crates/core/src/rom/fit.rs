use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ModelSpec, ParamVector};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::sampling::{XBatch, XSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Monte-Carlo points per step.
    pub n_points: usize,
    pub adam: AdamConfig,
    pub adam_iters: usize,
    /// Fresh points every this many Adam steps.
    pub resample_every: usize,
    /// Damped Gauss-Newton refinement steps on the final point set.
    pub polish_iters: usize,
    /// Target relative L² misfit `‖u_θ − g‖ / ‖g‖`.
    pub tolerance: f64,
    pub x_sampler: Option<XSampler>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_points: 4096,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            adam_iters: 1000,
            resample_every: 100,
            polish_iters: 50,
            tolerance: 1e-3,
            x_sampler: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: ParamVector,
    /// Relative L² misfit on a fresh validation point set.
    pub misfit: f64,
    pub iterations: usize,
    pub success: bool,
}

struct Residuals {
    loss: f64,
    norm_g: f64,
}

impl Residuals {
    fn relative(&self) -> f64 {
        if self.norm_g > 1e-24 {
            (self.loss / self.norm_g).sqrt()
        } else {
            self.loss.sqrt()
        }
    }
}

fn residuals(
    spec: &ModelSpec,
    theta: &[f64],
    g: &dyn Fn(&[f64]) -> f64,
    batch: &XBatch,
    grad: Option<&mut [f64]>,
) -> Residuals {
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut norm_g = 0.0;
    match grad {
        Some(grad) => {
            grad.iter_mut().for_each(|v| *v = 0.0);
            let mut row = vec![0.0; spec.n_params()];
            for (x, w) in batch.iter() {
                let u = spec.grad_theta_into(theta, x, &mut row);
                let gx = g(x);
                let r = u - gx;
                loss += w * r * r;
                norm_g += w * gx * gx;
                for (gk, jk) in grad.iter_mut().zip(&row) {
                    *gk += 2.0 * w * r * jk / n;
                }
            }
        }
        None => {
            for (x, w) in batch.iter() {
                let gx = g(x);
                let r = spec.value(theta, x) - gx;
                loss += w * r * r;
                norm_g += w * gx * gx;
            }
        }
    }
    Residuals {
        loss: loss / n,
        norm_g: norm_g / n,
    }
}

fn draw<R: Rng + ?Sized>(
    sampler: &XSampler,
    spec: &ModelSpec,
    theta: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<XBatch> {
    sampler.sample(spec, Some(theta), n, rng)
}

/// Fits `u_θ ≈ g` by minimizing the empirical squared L² misfit, starting at
/// `init`. Adam with periodic resampling is followed by damped Gauss-Newton
/// steps on the last point set. Non-convergence is reported through
/// [`FitReport::success`], not as an error.
pub fn fit_initial<R: Rng + ?Sized>(
    spec: &ModelSpec,
    g: &dyn Fn(&[f64]) -> f64,
    init: &[f64],
    config: &FitConfig,
    rng: &mut R,
) -> Result<FitReport> {
    spec.check_params(init)?;
    if config.n_points == 0 {
        return Err(Error::EmptyBatch);
    }
    if config.adam_iters + config.polish_iters == 0 {
        return Err(Error::Config("fit budget must be positive".into()));
    }
    let sampler = config
        .x_sampler
        .clone()
        .unwrap_or_else(|| XSampler::default_for(spec));
    let m = spec.n_params();
    let mut theta = init.to_vec();
    let mut batch = draw(&sampler, spec, &theta, config.n_points, rng)?;
    let start = residuals(spec, &theta, g, &batch, None);
    if start.relative() <= config.tolerance {
        let check = draw(&sampler, spec, &theta, config.n_points, rng)?;
        let misfit = residuals(spec, &theta, g, &check, None).relative();
        if misfit <= config.tolerance {
            return Ok(FitReport {
                params: ParamVector::new(*spec, theta)?,
                misfit,
                iterations: 0,
                success: true,
            });
        }
    }

    let mut adam = Adam::new(config.adam, m);
    let mut grad = vec![0.0; m];
    let mut iterations = 0;
    for it in 0..config.adam_iters {
        if it > 0 && config.resample_every > 0 && it % config.resample_every == 0 {
            batch = draw(&sampler, spec, &theta, config.n_points, rng)?;
        }
        let res = residuals(spec, &theta, g, &batch, Some(&mut grad));
        iterations += 1;
        if !res.loss.is_finite() {
            break;
        }
        if res.relative() <= 0.1 * config.tolerance {
            break;
        }
        adam.step(&mut theta, &grad);
    }

    if config.polish_iters > 0 {
        batch = draw(&sampler, spec, &theta, config.n_points, rng)?;
        iterations += gauss_newton(spec, g, &mut theta, &batch, config.polish_iters);
    }

    let check = draw(&sampler, spec, &theta, config.n_points, rng)?;
    let misfit = residuals(spec, &theta, g, &check, None).relative();
    Ok(FitReport {
        params: ParamVector::new(*spec, theta)?,
        misfit,
        iterations,
        success: misfit <= config.tolerance,
    })
}

/// Levenberg-Marquardt on a fixed point set; returns the steps taken.
fn gauss_newton(
    spec: &ModelSpec,
    g: &dyn Fn(&[f64]) -> f64,
    theta: &mut Vec<f64>,
    batch: &XBatch,
    iters: usize,
) -> usize {
    let m = spec.n_params();
    let mut mu = 1e-3;
    let mut row = vec![0.0; m];
    let mut current = residuals(spec, theta, g, batch, None).loss;
    for it in 0..iters {
        let mut a = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DVector::<f64>::zeros(m);
        for (x, w) in batch.iter() {
            let u = spec.grad_theta_into(theta, x, &mut row);
            let r = u - g(x);
            let jr = DVector::from_column_slice(&row);
            a.ger(w, &jr, &jr, 1.0);
            rhs.axpy(-w * r, &jr, 1.0);
        }
        let diag_scale = (0..m).map(|k| a[(k, k)]).fold(0.0f64, f64::max).max(1e-300);
        let mut accepted = false;
        for _ in 0..12 {
            let mut damped = a.clone();
            for k in 0..m {
                damped[(k, k)] += mu * (a[(k, k)] + 1e-9 * diag_scale);
            }
            let Some(chol) = damped.cholesky() else {
                mu *= 4.0;
                continue;
            };
            let step = chol.solve(&rhs);
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            let loss = residuals(spec, &trial, g, batch, None).loss;
            if loss.is_finite() && loss < current {
                *theta = trial;
                current = loss;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                break;
            }
            mu *= 4.0;
        }
        if !accepted || current == 0.0 {
            return it + 1;
        }
    }
    iters
}
